#pragma once

#include <cstddef>
#include <string>

#include "segkey/autograd.hpp"
#include "segkey/keying.hpp"
#include "segkey/tensor.hpp"

namespace segkey {

enum class Direction { kEncrypt, kDecrypt };

enum class EncryptionMethod {
  kShfInput,  // block-wise pixel shuffling of the input image
  kCpTap,     // channel permutation of the feature map at a tap point
};

std::string to_string(EncryptionMethod method);
EncryptionMethod parse_encryption_method(const std::string& text);

struct EncryptionSpec {
  EncryptionMethod method = EncryptionMethod::kCpTap;
  int tap = 6;                 // 1..6, CP only
  std::size_t block_size = 1;  // M, SHF only
};

// A spec together with its secret key.
struct Encryption {
  EncryptionSpec spec;
  PermutationKey key;
};

// Key length a spec requires for a feature map (CP) or image (SHF) with
// `channels` channels.
std::size_t required_key_length(const EncryptionSpec& spec, std::size_t channels);

// Throws ShapeError unless `key` fits `spec` for a tensor of `shape` (rank 3
// or 4; channels on axis rank-3).
void validate_encryption(const EncryptionSpec& spec, const PermutationKey& key,
                         const Shape& shape);

// Block-wise pixel shuffling. Every M x M block is flattened channel-major,
// then row, then column into a vector b of length L = c*M*M and replaced by
// b'(i) = b(key_i) (encrypt) or by its inverse (decrypt). Accepts (c,h,w) or
// (n,c,h,w).
Tensor shf_apply(const Tensor& x, const PermutationKey& key,
                 std::size_t block_size, Direction direction);

// Channel permutation x'(j,p,q) = x(key_j,p,q) (encrypt) or its inverse.
// Accepts (c,h,w) or (n,c,h,w).
Tensor cp_apply(const Tensor& x, const PermutationKey& key, Direction direction);

// Differentiable CP encryption of a rank-4 tap activation. The backward pass
// routes gradients through the inverse permutation.
Var tap_forward(GradTape& tape, Var x, const PermutationKey& key);

}  // namespace segkey
