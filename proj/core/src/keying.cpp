#include "segkey/keying.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "segkey/error.hpp"
#include "segkey/serialize.hpp"

namespace segkey {

namespace mp = boost::multiprecision;

std::string to_string(KeyMethod method) {
  return method == KeyMethod::kShf ? "SHF" : "CP";
}

KeyMethod parse_key_method(const std::string& text) {
  if (text == "SHF" || text == "shf") return KeyMethod::kShf;
  if (text == "CP" || text == "cp") return KeyMethod::kCp;
  throw FormatError("unknown key method '" + text + "'");
}

bool PermutationKey::is_identity() const {
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] != i + 1) return false;
  }
  return true;
}

std::vector<std::size_t> PermutationKey::zero_based() const {
  std::vector<std::size_t> out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = perm[i] - 1;
  return out;
}

bool is_bijection(const std::vector<std::uint32_t>& perm) {
  if (perm.empty()) return false;
  std::vector<bool> seen(perm.size(), false);
  for (std::uint32_t v : perm) {
    if (v < 1 || v > perm.size() || seen[v - 1]) return false;
    seen[v - 1] = true;
  }
  return true;
}

PermutationKey generate_permutation(std::size_t length, std::uint64_t seed,
                                    KeyMethod method) {
  if (length == 0) throw ShapeError("generate_permutation: length must be >= 1");
  PermutationKey key{method, std::vector<std::uint32_t>(length), seed};
  std::iota(key.perm.begin(), key.perm.end(), 1u);
  std::mt19937_64 rng(seed);
  for (std::size_t i = length - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(key.perm[i], key.perm[pick(rng)]);
  }
  return key;
}

PermutationKey identity_key(std::size_t length, KeyMethod method) {
  PermutationKey key{method, std::vector<std::uint32_t>(length), std::nullopt};
  std::iota(key.perm.begin(), key.perm.end(), 1u);
  return key;
}

PermutationKey invert_permutation(const PermutationKey& key) {
  PermutationKey inv{key.method, std::vector<std::uint32_t>(key.length()),
                     key.seed};
  for (std::size_t i = 0; i < key.length(); ++i) {
    inv.perm[key.perm[i] - 1] = static_cast<std::uint32_t>(i + 1);
  }
  return inv;
}

PermutationKey compose(const PermutationKey& a, const PermutationKey& b) {
  if (a.length() != b.length()) {
    throw ShapeError("compose: keys of length " + std::to_string(a.length()) +
                     " and " + std::to_string(b.length()));
  }
  PermutationKey out{a.method, std::vector<std::uint32_t>(a.length()),
                     std::nullopt};
  for (std::size_t i = 0; i < a.length(); ++i) out.perm[i] = a.perm[b.perm[i] - 1];
  return out;
}

double exact_log2(const mp::cpp_int& value) {
  if (value <= 0) throw ShapeError("exact_log2: value must be positive");
  const std::size_t msb = mp::msb(value);
  if (msb < 53) return std::log2(value.convert_to<double>());
  const std::size_t shift = msb - 52;
  const mp::cpp_int top = value >> shift;
  // Remaining low bits only move the result below double resolution.
  return std::log2(top.convert_to<double>()) + static_cast<double>(shift);
}

KeySpace keyspace(std::size_t channels, std::size_t block_size) {
  if (channels == 0 || block_size == 0) {
    throw ShapeError("keyspace: c and M must be >= 1");
  }
  const std::size_t length = channels * block_size * block_size;
  mp::cpp_int f = 1;
  for (std::size_t i = 2; i <= length; ++i) f *= i;
  return KeySpace{f, exact_log2(f)};
}

std::uint32_t perm_checksum(const std::vector<std::uint32_t>& perm) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(perm.size() * 4);
  for (std::uint32_t v : perm) {
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  return crc32(bytes);
}

std::string key_to_json(const PermutationKey& key) {
  nlohmann::json j;
  j["method"] = to_string(key.method);
  j["length"] = key.length();
  j["perm"] = key.perm;
  if (key.seed) j["seed"] = *key.seed;
  j["crc32"] = perm_checksum(key.perm);
  return j.dump(2) + "\n";
}

PermutationKey key_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("key file is not valid JSON: ") + e.what());
  }
  try {
    PermutationKey key;
    key.method = parse_key_method(j.at("method").get<std::string>());
    const auto length = j.at("length").get<std::size_t>();
    key.perm = j.at("perm").get<std::vector<std::uint32_t>>();
    if (j.contains("seed") && !j["seed"].is_null()) {
      key.seed = j["seed"].get<std::uint64_t>();
    }
    if (key.perm.size() != length) {
      throw FormatError("key declares length " + std::to_string(length) +
                        " but perm has " + std::to_string(key.perm.size()) +
                        " entries");
    }
    if (!is_bijection(key.perm)) throw FormatError("key perm is not a bijection");
    if (j.at("crc32").get<std::uint32_t>() != perm_checksum(key.perm)) {
      throw FormatError("key checksum mismatch");
    }
    return key;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed key file: ") + e.what());
  }
}

void save_key(const PermutationKey& key, const std::string& path) {
  if (!is_bijection(key.perm)) throw ShapeError("save_key: not a bijection");
  write_file_bytes(path, key_to_json(key));
}

PermutationKey load_key(const std::string& path) {
  return key_from_json(read_file_bytes(path));
}

}  // namespace segkey
