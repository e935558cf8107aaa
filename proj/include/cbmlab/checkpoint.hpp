// Binary model checkpoints.
//
// Layout (all integers little-endian u64 unless noted, doubles as IEEE-754
// little-endian bit patterns, strings as u64 length + bytes):
//   "CBMCKPT1"  magic, 8 bytes
//   u32 format version
//   architecture, concept spec, train config, seed
//   u64 parameter count, then per parameter: name, u64 rank, extents, values
//   u64 tag count, then key/value string pairs

#ifndef CBMLAB_CHECKPOINT_HPP
#define CBMLAB_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"
#include "cbmlab/train.hpp"

namespace cbm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  CbmModel model;
  ConceptSpec spec;
  TrainConfig train;
  std::uint64_t seed = 0;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cbm

#endif  // CBMLAB_CHECKPOINT_HPP
