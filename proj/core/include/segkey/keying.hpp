#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace segkey {

enum class KeyMethod { kShf, kCp };

std::string to_string(KeyMethod method);
KeyMethod parse_key_method(const std::string& text);

// A bijection on {1..L}, stored 1-based. For SHF, L = c * M * M; for CP,
// L = c. `seed` records provenance only; key files carry the explicit
// permutation.
struct PermutationKey {
  KeyMethod method = KeyMethod::kCp;
  std::vector<std::uint32_t> perm;
  std::optional<std::uint64_t> seed;

  std::size_t length() const { return perm.size(); }
  bool is_identity() const;

  // 0-based view: zero_based()[i] = perm[i] - 1.
  std::vector<std::size_t> zero_based() const;

  friend bool operator==(const PermutationKey& a, const PermutationKey& b) {
    return a.method == b.method && a.perm == b.perm;
  }
};

bool is_bijection(const std::vector<std::uint32_t>& perm);

// Fisher-Yates shuffle of [1..length] driven by a seeded mt19937_64.
PermutationKey generate_permutation(std::size_t length, std::uint64_t seed,
                                    KeyMethod method = KeyMethod::kCp);

PermutationKey identity_key(std::size_t length,
                            KeyMethod method = KeyMethod::kCp);

// q with q[key[i]] = i.
PermutationKey invert_permutation(const PermutationKey& key);

// (a ∘ b)[i] = a[b[i]].
PermutationKey compose(const PermutationKey& a, const PermutationKey& b);

struct KeySpace {
  boost::multiprecision::cpp_int exact;
  double log2 = 0.0;
};

// (c * M * M)!; the CP key space is the M = 1 case.
KeySpace keyspace(std::size_t channels, std::size_t block_size);

// log2 of a positive integer from its leading bits; exact for powers of two.
double exact_log2(const boost::multiprecision::cpp_int& value);

std::uint32_t perm_checksum(const std::vector<std::uint32_t>& perm);

std::string key_to_json(const PermutationKey& key);
PermutationKey key_from_json(const std::string& text);
void save_key(const PermutationKey& key, const std::string& path);
PermutationKey load_key(const std::string& path);

}  // namespace segkey
