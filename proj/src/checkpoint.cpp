#include "cbmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cbm {

namespace {

constexpr char kMagic[8] = {'C', 'B', 'M', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void u64(std::uint64_t v) { le(v, 8); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint64_t u64() { return le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(in_.data() + pos_, p, n) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::uint64_t n) {
    if (n > in_.size() - pos_) throw CheckpointError("checkpoint is truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_params(Writer& w, const std::vector<NamedParam>& group) {
  for (const auto& p : group) {
    w.str(p.name);
    w.u64(p.value.rank());
    for (auto d : p.value.shape()) w.u64(d);
    for (double v : p.value.data()) w.f64(v);
  }
}

void read_params(Reader& r, std::vector<NamedParam>& group) {
  for (auto& p : group) {
    const auto name = r.str();
    if (name != p.name) throw CheckpointError("checkpoint parameter '" + name + "' where '" + p.name + "' was expected");
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    if (shape != p.value.shape())
      throw CheckpointError("parameter " + name + " has shape " + shape_str(shape) + ", architecture needs " +
                            shape_str(p.value.shape()));
    for (auto& v : p.value.mutable_data()) v = r.f64();
  }
}

// Parameter values the architecture needs, in floating point so corrupt
// extents cannot overflow.
double value_count(const Architecture& a) {
  const double t = static_cast<double>(a.num_concepts), k = static_cast<double>(a.num_outputs);
  double g = 0;
  if (a.concept_net == ConceptNet::kConv) {
    const double c = static_cast<double>(a.input.channels), ch = static_cast<double>(a.conv_channels);
    const double flat = ch * static_cast<double>(a.input.height / 2) * static_cast<double>(a.input.width / 2);
    g = ch * c * 9 + ch + ch * ch * 9 + ch + flat * t + t;
  } else {
    g = static_cast<double>(a.input.channels) * static_cast<double>(a.input.height) *
            static_cast<double>(a.input.width) * t + t;
  }
  return g + t * k + k;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);

  const auto& a = ckpt.model.arch();
  w.str(to_string(a.concept_net));
  w.u64(a.input.channels);
  w.u64(a.input.height);
  w.u64(a.input.width);
  w.u64(a.conv_channels);
  w.u64(a.num_concepts);
  w.u64(a.num_outputs);
  w.str(to_string(a.concept_kind));
  w.str(to_string(a.task));

  w.u64(ckpt.spec.names.size());
  for (const auto& n : ckpt.spec.names) w.str(n);
  w.str(to_string(ckpt.spec.kind));
  w.f64(ckpt.spec.relevance_threshold);

  const auto& t = ckpt.train;
  w.str(to_string(t.paradigm));
  w.u64(t.epochs);
  w.u64(t.batch_size);
  w.f64(t.task_weight);
  w.f64(t.concept_weight);
  w.f64(t.lr);
  w.f64(t.lr_finetune);
  w.f64(t.momentum);
  w.u64(t.seed);
  w.u64(ckpt.seed);

  w.u64(ckpt.model.named_g().size() + ckpt.model.named_f().size());
  write_params(w, ckpt.model.named_g());
  write_params(w, ckpt.model.named_f());

  w.u64(ckpt.model.tags().size());
  for (const auto& [k, v] : ckpt.model.tags()) {
    w.str(k);
    w.str(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.expect(kMagic, sizeof kMagic);
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));

  try {
    Architecture a;
    a.concept_net = concept_net_from_string(r.str());
    a.input.channels = r.u64();
    a.input.height = r.u64();
    a.input.width = r.u64();
    a.conv_channels = r.u64();
    a.num_concepts = r.u64();
    a.num_outputs = r.u64();
    a.concept_kind = concept_kind_from_string(r.str());
    a.task = task_kind_from_string(r.str());
    a.validate();
    // Every value takes 8 bytes; refuse to allocate for sizes the file cannot hold.
    if (value_count(a) > static_cast<double>(r.remaining()) / 8)
      throw CheckpointError("checkpoint is truncated or its architecture is corrupt");

    Checkpoint ckpt;
    const auto nnames = r.u64();
    if (nnames > r.remaining() / 8) throw CheckpointError("corrupt checkpoint: " + std::to_string(nnames) + " names");
    ckpt.spec.names.resize(nnames);
    for (auto& n : ckpt.spec.names) n = r.str();
    ckpt.spec.kind = concept_kind_from_string(r.str());
    ckpt.spec.relevance_threshold = r.f64();

    auto& t = ckpt.train;
    t.paradigm = paradigm_from_string(r.str());
    t.epochs = r.u64();
    t.batch_size = r.u64();
    t.task_weight = r.f64();
    t.concept_weight = r.f64();
    t.lr = r.f64();
    t.lr_finetune = r.f64();
    t.momentum = r.f64();
    t.seed = r.u64();
    ckpt.seed = r.u64();

    ckpt.model = CbmModel(a, 0, 0);
    const auto count = r.u64();
    if (count != ckpt.model.named_g().size() + ckpt.model.named_f().size())
      throw CheckpointError("checkpoint holds " + std::to_string(count) + " parameters, architecture needs " +
                            std::to_string(ckpt.model.named_g().size() + ckpt.model.named_f().size()));
    read_params(r, ckpt.model.named_g());
    read_params(r, ckpt.model.named_f());

    const auto ntags = r.u64();
    for (std::uint64_t i = 0; i < ntags; ++i) {
      auto k = r.str();
      ckpt.model.tags()[k] = r.str();
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
    return ckpt;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace cbm
