#include "cbmlab/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "cbmlab/rng.hpp"

namespace cbm {

std::string to_string(ConceptKind kind) { return kind == ConceptKind::kBinary ? "binary" : "continuous"; }

ConceptKind concept_kind_from_string(const std::string& s) {
  if (s == "binary") return ConceptKind::kBinary;
  if (s == "continuous") return ConceptKind::kContinuous;
  throw std::invalid_argument("unknown concept kind '" + s + "'");
}

void ConceptSpec::validate() const {
  std::set<std::string> seen;
  for (const auto& n : names)
    if (!seen.insert(n).second) throw std::invalid_argument("duplicate concept name '" + n + "'");
  if (kind == ConceptKind::kBinary && !(relevance_threshold > 0 && relevance_threshold < 1))
    throw std::invalid_argument("binary relevance threshold must lie in (0,1)");
}

// ---- IDX ----------------------------------------------------------------

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const char* what) {
  if (bytes.size() < offset + 4)
    throw IdxError(IdxErrc::kTruncated, std::string(what) + ": header truncated at byte " + std::to_string(offset));
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IdxError(IdxErrc::kIo, "no such file: " + path.string());
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IdxError(IdxErrc::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw IdxError(IdxErrc::kIo, "read error in " + path.string());
  return out;
}

}  // namespace

IdxData parse_idx_bytes(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  const std::uint32_t img_magic = read_be32(image_bytes, 0, "image file");
  if (img_magic != kImageMagic) {
    std::ostringstream os;
    os << "image file: bad magic 0x" << std::hex << img_magic << " (expected 0x803)";
    throw IdxError(IdxErrc::kBadMagic, os.str());
  }
  const std::uint32_t lab_magic = read_be32(label_bytes, 0, "label file");
  if (lab_magic != kLabelMagic) {
    std::ostringstream os;
    os << "label file: bad magic 0x" << std::hex << lab_magic << " (expected 0x801)";
    throw IdxError(IdxErrc::kBadMagic, os.str());
  }
  const std::size_t count = read_be32(image_bytes, 4, "image file");
  const std::size_t rows = read_be32(image_bytes, 8, "image file");
  const std::size_t cols = read_be32(image_bytes, 12, "image file");
  const std::size_t label_count = read_be32(label_bytes, 4, "label file");
  if (count != label_count)
    throw IdxError(IdxErrc::kCountMismatch, "image file holds " + std::to_string(count) + " images but label file " +
                                                std::to_string(label_count) + " labels");
  const std::size_t pixels = rows * cols;
  if (image_bytes.size() < 16 + count * pixels)
    throw IdxError(IdxErrc::kTruncated, "image payload truncated: need " + std::to_string(16 + count * pixels) +
                                            " bytes, have " + std::to_string(image_bytes.size()));
  if (label_bytes.size() < 8 + count)
    throw IdxError(IdxErrc::kTruncated, "label payload truncated: need " + std::to_string(8 + count) +
                                            " bytes, have " + std::to_string(label_bytes.size()));

  IdxData data;
  data.height = rows;
  data.width = cols;
  data.items.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& item = data.items[i];
    item.label = label_bytes[8 + i];
    item.pixels.resize(pixels);
    const std::uint8_t* src = image_bytes.data() + 16 + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) item.pixels[p] = src[p] / 255.0;
  }
  return data;
}

IdxData parse_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_maybe_gzip(images_path);
  const auto labels = read_maybe_gzip(labels_path);
  return parse_idx_bytes(images, labels);
}

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw IdxError(IdxErrc::kIo, "cannot write " + path.string());
    const bool ok = bytes.empty() || gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) ==
                                         static_cast<int>(bytes.size());
    if (gzclose(f) != Z_OK || !ok) throw IdxError(IdxErrc::kIo, "failed writing " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IdxError(IdxErrc::kIo, "cannot write " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_idx_images(const IdxData& data) {
  std::vector<std::uint8_t> out;
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(data.items.size()));
  put_be32(out, static_cast<std::uint32_t>(data.height));
  put_be32(out, static_cast<std::uint32_t>(data.width));
  for (const auto& item : data.items) {
    if (item.pixels.size() != data.height * data.width)
      throw std::invalid_argument("image has " + std::to_string(item.pixels.size()) + " pixels, expected " +
                                  std::to_string(data.height * data.width));
    for (double v : item.pixels) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
  }
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const IdxData& data) {
  std::vector<std::uint8_t> out;
  put_be32(out, 0x00000801);
  put_be32(out, static_cast<std::uint32_t>(data.items.size()));
  for (const auto& item : data.items) {
    if (item.label > 255) throw std::invalid_argument("IDX labels are single bytes");
    out.push_back(static_cast<std::uint8_t>(item.label));
  }
  return out;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const IdxData& data) {
  write_bytes(images_path, encode_idx_images(data));
  write_bytes(labels_path, encode_idx_labels(data));
}

// ---- ConceptMNIST --------------------------------------------------------

const ShapeTable& default_shape_table() {
  // Read off typeset glyphs: {curved, straight}.
  static const ShapeTable table = {{{1, 0}, {0, 1}, {1, 1}, {1, 0}, {0, 1}, {1, 1}, {1, 0}, {0, 1}, {1, 0}, {1, 1}}};
  return table;
}

ShapeTable read_shape_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open concept table " + path.string());
  ShapeTable table = default_shape_table();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    int digit = 0, curved = 0, straight = 0;
    if (!(ls >> digit)) continue;
    std::string extra;
    if (!(ls >> curved >> straight) || (ls >> extra) || digit < 0 || digit > 9 || (curved != 0 && curved != 1) ||
        (straight != 0 && straight != 1))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 'digit curved straight' with digit 0-9 and flags 0/1");
    table[static_cast<std::size_t>(digit)] = {curved, straight};
  }
  return table;
}

ConceptSpec concept_mnist_spec() {
  ConceptSpec spec;
  for (int d = 0; d < 10; ++d) spec.names.push_back("Digit" + std::to_string(d) + ":present");
  spec.names.emplace_back("CurvedLine:present");
  spec.names.emplace_back("StraightLine:present");
  spec.kind = ConceptKind::kBinary;
  spec.relevance_threshold = 0.5;
  return spec;
}

std::vector<double> annotate_concept_mnist(std::size_t label, const ShapeTable& table) {
  if (label > 9) throw std::invalid_argument("ConceptMNIST label must be a digit, got " + std::to_string(label));
  std::vector<double> c(12, 0.0);
  c[label] = 1.0;
  c[10] = table[label][0];
  c[11] = table[label][1];
  return c;
}

DatasetSplit make_split(std::vector<ConceptSample> samples, ConceptSpec spec, ImageShape image,
                        std::size_t num_classes, std::uint64_t seed, SplitFractions fractions) {
  if (fractions.train < 0 || fractions.val < 0 || fractions.train + fractions.val > 1)
    throw std::invalid_argument("split fractions must be non-negative and sum to at most 1");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5b117));
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = static_cast<double>(samples.size());
  const auto n_train = static_cast<std::size_t>(std::floor(fractions.train * n));
  const auto n_val = static_cast<std::size_t>(std::floor(fractions.val * n));

  DatasetSplit split;
  split.spec = std::move(spec);
  split.image = image;
  split.num_classes = num_classes;
  split.seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_train ? split.train : (i < n_train + n_val ? split.val : split.test);
    dst.push_back(std::move(samples[order[i]]));
  }
  return split;
}

DatasetSplit load_concept_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                std::uint64_t split_seed, const ShapeTable& table, SplitFractions fractions) {
  IdxData raw = parse_idx(images_path, labels_path);
  std::vector<ConceptSample> samples;
  samples.reserve(raw.items.size());
  for (auto& item : raw.items) {
    if (item.label > 9)
      throw std::runtime_error("label " + std::to_string(item.label) + " is not a digit");
    ConceptSample s;
    s.concepts = annotate_concept_mnist(item.label, table);
    s.label = item.label;
    s.image = std::move(item.pixels);
    samples.push_back(std::move(s));
  }
  return make_split(std::move(samples), concept_mnist_spec(), ImageShape{1, raw.height, raw.width}, 10, split_seed,
                    fractions);
}

DatasetSplit synth_blob_dataset(std::size_t n, std::uint64_t seed, const ShapeTable& table) {
  if (n < 30) throw std::invalid_argument("blob corpus needs at least 30 samples, got " + std::to_string(n));
  constexpr std::size_t kSide = 12;
  constexpr double kRadius = 3.6, kSigma = 1.3;
  const double mid = (kSide - 1) / 2.0;

  Rng rng(mix_seed(seed, 0xb10b));
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::uniform_real_distribution<double> amplitude(0.7, 1.0);
  std::uniform_real_distribution<double> noise(0.0, 0.08);

  std::vector<ConceptSample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 10;
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(label) / 10.0;
    const double cy = mid + kRadius * std::sin(angle) + jitter(rng);
    const double cx = mid + kRadius * std::cos(angle) + jitter(rng);
    const double amp = amplitude(rng);
    ConceptSample s;
    s.label = label;
    s.concepts = annotate_concept_mnist(label, table);
    s.image.resize(kSide * kSide);
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double v = amp * std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma)) + noise(rng);
        s.image[y * kSide + x] = std::clamp(v, 0.0, 1.0);
      }
    }
    samples.push_back(std::move(s));
  }
  return make_split(std::move(samples), concept_mnist_spec(), ImageShape{1, kSide, kSide}, 10, seed);
}

// ---- batching ------------------------------------------------------------

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0xe90c0000 + epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(order.begin() + start, order.begin() + std::min(n, start + batch_size));
  return out;
}

Batch make_batch(std::span<const ConceptSample> samples, std::span<const std::size_t> indices, ImageShape shape) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const std::size_t b = indices.size(), pixels = shape.numel();
  const std::size_t t = samples[indices[0]].concepts.size();
  std::vector<double> images(b * pixels), concepts(b * t);
  Batch batch;
  batch.labels.reserve(b);
  for (std::size_t r = 0; r < b; ++r) {
    const auto& s = samples[indices[r]];
    if (s.image.size() != pixels || s.concepts.size() != t)
      throw ShapeError("sample " + std::to_string(indices[r]) + " does not match the batch layout");
    std::copy(s.image.begin(), s.image.end(), images.begin() + r * pixels);
    std::copy(s.concepts.begin(), s.concepts.end(), concepts.begin() + r * t);
    batch.labels.push_back(s.label);
  }
  batch.images = Tensor::from({b, shape.channels, shape.height, shape.width}, std::move(images));
  batch.concepts = Tensor::from({b, t}, std::move(concepts));
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

}  // namespace cbm
