// Concept-annotated image datasets: MNIST IDX ingestion, ConceptMNIST
// annotation, a synthetic blob corpus, seeded splits and mini-batching.

#ifndef CBMLAB_DATASET_HPP
#define CBMLAB_DATASET_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbmlab/tensor.hpp"

namespace cbm {

enum class ConceptKind { kBinary, kContinuous };

std::string to_string(ConceptKind kind);
ConceptKind concept_kind_from_string(const std::string& s);

struct ConceptSpec {
  std::vector<std::string> names;
  ConceptKind kind = ConceptKind::kBinary;
  double relevance_threshold = 0.5;

  std::size_t size() const { return names.size(); }
  // Throws std::invalid_argument on duplicate names or a binary threshold
  // outside (0,1).
  void validate() const;
};

struct ConceptSample {
  std::vector<double> image;  // row-major, channels x height x width, values in [0,1]
  std::size_t label = 0;      // class index; regression tasks read it as a number
  std::vector<double> concepts;
};

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t numel() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct DatasetSplit {
  ConceptSpec spec;
  ImageShape image;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<ConceptSample> train;
  std::vector<ConceptSample> val;
  std::vector<ConceptSample> test;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

// ---- IDX ----------------------------------------------------------------

enum class IdxErrc { kIo, kBadMagic, kTruncated, kCountMismatch };

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  IdxErrc code() const { return code_; }

 private:
  IdxErrc code_;
};

struct LabeledImage {
  std::vector<double> pixels;  // scaled to [0,1]
  std::size_t label = 0;
};

struct IdxData {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<LabeledImage> items;
};

// Big-endian IDX: images magic 0x00000803, count, rows, cols, bytes;
// labels magic 0x00000801, count, bytes.
IdxData parse_idx_bytes(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes);

// Reads plain or gzip-compressed IDX files.
IdxData parse_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Inverse of parse_idx_bytes; pixels are rounded to 0-255 grey levels.
std::vector<std::uint8_t> encode_idx_images(const IdxData& data);
std::vector<std::uint8_t> encode_idx_labels(const IdxData& data);

// Writes both files, gzip-compressed when a path ends in ".gz". Throws
// IdxError(kIo).
void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const IdxData& data);

// ---- ConceptMNIST --------------------------------------------------------

// Per digit: {curved line present, straight line present}.
using ShapeTable = std::array<std::array<int, 2>, 10>;

const ShapeTable& default_shape_table();

// One line per digit, "digit curved straight"; '#' starts a comment.
// Digits not listed keep their default entry.
ShapeTable read_shape_table(const std::filesystem::path& path);

ConceptSpec concept_mnist_spec();

// one-hot(label) followed by the curved/straight pair; length 12.
std::vector<double> annotate_concept_mnist(std::size_t label, const ShapeTable& table = default_shape_table());

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
};

DatasetSplit load_concept_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                std::uint64_t split_seed, const ShapeTable& table = default_shape_table(),
                                SplitFractions fractions = {});

// Seeded shuffle then train/val/test cut; sizes are floor(train*n),
// floor(val*n) and the remainder.
DatasetSplit make_split(std::vector<ConceptSample> samples, ConceptSpec spec, ImageShape image,
                        std::size_t num_classes, std::uint64_t seed, SplitFractions fractions = {});

// 12x12 Gaussian blobs at class-dependent positions, labels i % 10, and the
// ConceptMNIST concept schema keyed on the class. Needs n >= 30.
DatasetSplit synth_blob_dataset(std::size_t n, std::uint64_t seed, const ShapeTable& table = default_shape_table());

// ---- batching ------------------------------------------------------------

struct Batch {
  Tensor images;    // [B x C x H x W]
  Tensor concepts;  // [B x T]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // positions in the source sample list
};

// Index groups for one epoch: a shuffle seeded by (seed, epoch), cut into
// batch_size chunks with a trailing short batch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch);

Batch make_batch(std::span<const ConceptSample> samples, std::span<const std::size_t> indices, ImageShape shape);

}  // namespace cbm

#endif  // CBMLAB_DATASET_HPP
