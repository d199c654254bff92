#include "outliertune/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "outliertune/errors.hpp"

namespace otune {

namespace {

constexpr std::string_view kMagic = "OTUN1";

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::int8_t i8() { return static_cast<std::int8_t>(uint<std::uint8_t>()); }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_dim(std::size_t v) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("tensor dimension exceeds u32");
  return static_cast<std::uint32_t>(v);
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF64: return 8;
    case DType::kF32: return 4;
    case DType::kI8: return 1;
  }
  return 0;
}

}  // namespace

void TensorArchive::add(std::string name, const MatF& m, DType dtype) {
  if (dtype == DType::kI8) throw ContractError("archive: float matrix cannot be stored as i8");
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("archive: name too long");
  if (contains(name)) throw ContractError("archive: duplicate tensor '" + name + "'");
  NamedTensor t{std::move(name), dtype, checked_dim(m.rows()), checked_dim(m.cols()), m.values(), {}};
  if (dtype == DType::kF32)
    for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
  tensors_.push_back(std::move(t));
}

void TensorArchive::add(std::string name, std::span<const double> v, DType dtype) {
  add(std::move(name), MatF(1, v.size(), std::vector<double>(v.begin(), v.end())), dtype);
}

void TensorArchive::add(std::string name, const MatI8& m) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("archive: name too long");
  if (contains(name)) throw ContractError("archive: duplicate tensor '" + name + "'");
  tensors_.push_back({std::move(name), DType::kI8, checked_dim(m.rows()), checked_dim(m.cols()), {}, m.values()});
}

bool TensorArchive::contains(std::string_view name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const NamedTensor& t) { return t.name == name; });
}

const NamedTensor& TensorArchive::find(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw FormatError("checkpoint: missing tensor '" + std::string(name) + "'");
}

MatF TensorArchive::matrix(std::string_view name) const {
  const auto& t = find(name);
  if (t.dtype == DType::kI8) throw FormatError("checkpoint: '" + t.name + "' is not a float tensor");
  try {
    return MatF(t.rows, t.cols, t.values);
  } catch (const DomainError&) {
    throw FormatError("checkpoint: '" + t.name + "' holds non-finite values");
  }
}

std::vector<double> TensorArchive::vector(std::string_view name) const {
  const auto& t = find(name);
  if (t.rows != 1) throw FormatError("checkpoint: '" + t.name + "' is not a row vector");
  return matrix(name).values();
}

double TensorArchive::scalar(std::string_view name) const {
  const auto v = vector(name);
  if (v.size() != 1) throw FormatError("checkpoint: '" + std::string(name) + "' is not a scalar");
  return v[0];
}

MatI8 TensorArchive::codes(std::string_view name) const {
  const auto& t = find(name);
  if (t.dtype != DType::kI8) throw FormatError("checkpoint: '" + t.name + "' is not an i8 tensor");
  return MatI8(t.rows, t.cols, t.codes);
}

std::vector<std::uint8_t> TensorArchive::encode() const {
  Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.uint(checked_dim(tensors_.size()));
  for (const auto& t : tensors_) {
    w.uint(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint(static_cast<std::uint8_t>(t.dtype));
    w.uint(t.rows);
    w.uint(t.cols);
    switch (t.dtype) {
      case DType::kF64:
        for (double v : t.values) w.f64(v);
        break;
      case DType::kF32:
        for (double v : t.values) w.f32(static_cast<float>(v));
        break;
      case DType::kI8:
        w.bytes(t.codes.data(), t.codes.size());
        break;
    }
  }
  return w.take();
}

TensorArchive TensorArchive::decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.remaining() < kMagic.size() || r.str(kMagic.size()) != kMagic)
    throw FormatError("checkpoint: bad magic (expected OTUN1)");
  const auto count = r.uint<std::uint32_t>();
  TensorArchive a;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.uint<std::uint16_t>());
    const auto dt = r.uint<std::uint8_t>();
    if (dt > 2) throw FormatError("checkpoint: unknown dtype " + std::to_string(dt) + " for '" + t.name + "'");
    t.dtype = static_cast<DType>(dt);
    t.rows = r.uint<std::uint32_t>();
    t.cols = r.uint<std::uint32_t>();
    const std::uint64_t n = std::uint64_t{t.rows} * t.cols;
    if (n > r.remaining() / dtype_size(t.dtype)) throw FormatError("checkpoint: payload of '" + t.name + "' truncated");
    if (a.contains(t.name)) throw FormatError("checkpoint: duplicate tensor '" + t.name + "'");
    switch (t.dtype) {
      case DType::kF64:
        t.values.resize(n);
        for (auto& v : t.values) v = r.f64();
        break;
      case DType::kF32:
        t.values.resize(n);
        for (auto& v : t.values) v = static_cast<double>(r.f32());
        break;
      case DType::kI8:
        t.codes.resize(n);
        for (auto& v : t.codes) v = r.i8();
        break;
    }
    a.tensors_.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after last tensor");
  return a;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + p.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError("read failed on '" + p.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + p.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed on '" + p.string() + "'");
}

namespace {

void add_common(TensorArchive& a, double kind, const BlockDims& d, const LayerNorm& ln1,
                const LayerNorm& ln2, ResidualTap tap, DType dtype) {
  a.add("meta.kind", std::vector<double>{kind});
  a.add("meta.dims", std::vector<double>{double(d.hidden), double(d.heads), double(d.ffn)});
  a.add("meta.residual", std::vector<double>{tap == ResidualTap::kPostNorm ? 1.0 : 0.0});
  a.add("ln1.eps", std::vector<double>{ln1.eps});
  a.add("ln2.eps", std::vector<double>{ln2.eps});
  a.add("ln1.gamma", ln1.gamma, dtype);
  a.add("ln1.beta", ln1.beta, dtype);
  a.add("ln2.gamma", ln2.gamma, dtype);
  a.add("ln2.beta", ln2.beta, dtype);
}

std::size_t as_count(double v, const char* what) {
  if (!(v >= 0.0) || v > 1e9 || v != std::floor(v))
    throw FormatError(std::string("checkpoint: bad ") + what);
  return static_cast<std::size_t>(v);
}

BlockDims read_dims(const TensorArchive& a) {
  const auto d = a.vector("meta.dims");
  if (d.size() != 3) throw FormatError("checkpoint: meta.dims must hold 3 values");
  return {as_count(d[0], "hidden"), as_count(d[1], "heads"), as_count(d[2], "ffn")};
}

ResidualTap read_tap(const TensorArchive& a) {
  const double v = a.scalar("meta.residual");
  if (v == 0.0) return ResidualTap::kPreNorm;
  if (v == 1.0) return ResidualTap::kPostNorm;
  throw FormatError("checkpoint: bad meta.residual");
}

LayerNorm read_ln(const TensorArchive& a, const std::string& p) {
  return {a.vector(p + ".gamma"), a.vector(p + ".beta"), a.scalar(p + ".eps")};
}

void add_linear(TensorArchive& a, const std::string& p, const LinearLayer& l, DType dtype) {
  a.add(p + ".weight", l.weight, dtype);
  a.add(p + ".bias", l.bias, dtype);
}

LinearLayer read_linear(const TensorArchive& a, const std::string& p, QuantMode mode) {
  return {a.matrix(p + ".weight"), a.vector(p + ".bias"), mode};
}

std::vector<double> scheme_row(const QScheme& s) {
  return {double(s.bits), s.symmetric() ? 0.0 : 1.0,
          double(static_cast<int>(s.axis))};
}

QScheme read_scheme(const TensorArchive& a, const std::string& name) {
  const auto v = a.vector(name);
  if (v.size() != 3 || (v[1] != 0.0 && v[1] != 1.0) || v[2] < 0 || v[2] > 2)
    throw FormatError("checkpoint: bad scheme '" + name + "'");
  QScheme s{static_cast<int>(v[0]), v[1] == 0.0 ? Symmetry::kSymmetric : Symmetry::kAsymmetric,
            static_cast<Axis>(static_cast<int>(v[2]))};
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return s;
}

void add_qtensor(TensorArchive& a, const std::string& p, const QTensor& q) {
  a.add(p, q.ints);
  a.add(p + ".scale", q.scales);
  std::vector<double> zp(q.zero_points.begin(), q.zero_points.end());
  a.add(p + ".zp", zp);
  a.add(p + ".scheme", scheme_row(q.scheme));
}

QTensor read_qtensor(const TensorArchive& a, const std::string& p) {
  QTensor q;
  q.ints = a.codes(p);
  q.scheme = read_scheme(a, p + ".scheme");
  q.scales = a.vector(p + ".scale");
  for (double z : a.vector(p + ".zp")) {
    if (z != std::floor(z) || std::abs(z) > 1e6) throw FormatError("checkpoint: bad zero point in '" + p + "'");
    q.zero_points.push_back(static_cast<std::int32_t>(z));
  }
  try {
    q.validate();
  } catch (const ContractError& e) {
    throw FormatError("checkpoint: '" + p + "': " + e.what());
  }
  return q;
}

template <typename F>
auto as_format_error(F&& f) {
  try {
    return f();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("checkpoint: inconsistent shapes: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace

bool is_transformed(const TensorArchive& a) { return a.scalar("meta.kind") == 1.0; }

TensorArchive to_archive(const BlockModel& m, DType dtype) {
  m.validate();
  TensorArchive a;
  add_common(a, 0.0, m.dims, m.ln1, m.ln2, m.residual, dtype);
  add_linear(a, "qkv", m.qkv, dtype);
  add_linear(a, "out", m.out, dtype);
  add_linear(a, "fc1", m.fc1, dtype);
  add_linear(a, "fc2", m.fc2, dtype);
  return a;
}

BlockModel model_from_archive(const TensorArchive& a) {
  if (a.scalar("meta.kind") != 0.0) throw FormatError("checkpoint: not a plain block model");
  return as_format_error([&] {
    BlockModel m;
    m.dims = read_dims(a);
    m.residual = read_tap(a);
    m.ln1 = read_ln(a, "ln1");
    m.ln2 = read_ln(a, "ln2");
    m.qkv = read_linear(a, "qkv", QuantMode::kFoldedPerChannel);
    m.out = read_linear(a, "out", QuantMode::kTokenChannel);
    m.fc1 = read_linear(a, "fc1", QuantMode::kFoldedPerChannel);
    m.fc2 = read_linear(a, "fc2", QuantMode::kTokenChannel);
    m.validate();
    return m;
  });
}

TensorArchive to_archive(const TransformedBlock& t) {
  TensorArchive a;
  add_common(a, 1.0, t.dims, t.ln1, t.ln2, t.residual, DType::kF64);
  a.add("meta.wscheme", scheme_row(t.options.weight));
  a.add("meta.ascheme", scheme_row(t.options.activation));
  a.add("meta.symmetrize", std::vector<double>{t.options.symmetrize ? 1.0 : 0.0});
  for (const auto& [p, f] : {std::pair<std::string, const FoldedLinear*>{"qkv", &t.qkv}, {"fc1", &t.fc1}}) {
    a.add(p + ".ws", f->ws);
    add_qtensor(a, p + ".wsq", f->wsq);
    a.add(p + ".bias", f->bias);
    a.add(p + ".sx", f->sx);
    a.add(p + ".z", f->sym_z);
  }
  for (const auto& [p, l] : {std::pair<std::string, const TokenChannelLinear*>{"out", &t.out}, {"fc2", &t.fc2}}) {
    add_linear(a, p, l->layer, DType::kF64);
    add_qtensor(a, p + ".wq", l->wq);
  }
  return a;
}

TransformedBlock transformed_from_archive(const TensorArchive& a) {
  if (!is_transformed(a)) throw FormatError("checkpoint: not a transformed model");
  return as_format_error([&] {
    TransformedBlock t;
    t.dims = read_dims(a);
    t.residual = read_tap(a);
    t.ln1 = read_ln(a, "ln1");
    t.ln2 = read_ln(a, "ln2");
    t.options.weight = read_scheme(a, "meta.wscheme");
    t.options.activation = read_scheme(a, "meta.ascheme");
    t.options.symmetrize = a.scalar("meta.symmetrize") != 0.0;
    for (const auto& [p, f] : {std::pair<std::string, FoldedLinear*>{"qkv", &t.qkv}, {"fc1", &t.fc1}}) {
      f->ws = a.matrix(p + ".ws");
      f->wsq = read_qtensor(a, p + ".wsq");
      f->bias = a.vector(p + ".bias");
      f->sx = a.vector(p + ".sx");
      f->sym_z = a.vector(p + ".z");
      f->act_scheme = t.options.activation;
      f->validate();
      for (double s : f->sx)
        if (!(s > 0.0)) throw FormatError("checkpoint: nonpositive activation scale in '" + p + "'");
    }
    for (const auto& [p, l] : {std::pair<std::string, TokenChannelLinear*>{"out", &t.out}, {"fc2", &t.fc2}}) {
      l->layer = read_linear(a, p, QuantMode::kTokenChannel);
      l->layer.validate();
      l->wq = read_qtensor(a, p + ".wq");
      l->act_scheme = {t.options.activation.bits, Symmetry::kSymmetric, Axis::kPerToken};
      if (l->wq.rows() != l->layer.in_features() || l->wq.cols() != l->layer.out_features())
        throw FormatError("checkpoint: '" + p + ".wq' shape disagrees with weight");
    }
    const std::size_t n = t.dims.hidden;
    if (t.ln1.gamma.size() != n || t.ln2.gamma.size() != n || t.qkv.sx.size() != n ||
        t.fc1.sx.size() != n || t.qkv.bias.size() != 3 * n || t.fc1.bias.size() != t.dims.ffn ||
        t.out.layer.out_features() != n || t.fc2.layer.in_features() != t.dims.ffn)
      throw FormatError("checkpoint: transformed block dimensions do not chain");
    return t;
  });
}

void save_model(const std::filesystem::path& p, const BlockModel& m, DType dtype) {
  write_file(p, to_archive(m, dtype).encode());
}

BlockModel load_model(const std::filesystem::path& p) {
  return model_from_archive(TensorArchive::decode(read_file(p)));
}

void save_transformed(const std::filesystem::path& p, const TransformedBlock& t) {
  write_file(p, to_archive(t).encode());
}

TransformedBlock load_transformed(const std::filesystem::path& p) {
  return transformed_from_archive(TensorArchive::decode(read_file(p)));
}

}  // namespace otune
