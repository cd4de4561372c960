#include "mtlnet/model.hpp"

#include "mtlnet/rng.hpp"
#include "mtlnet/tensor_io.hpp"

#include <cmath>
#include <fstream>

namespace mtlnet {

std::vector<Anchor> default_anchors() {
  return {{1.0, 1.0}, {2.0, 2.0}, {4.0, 2.0}, {2.0, 4.0}, {6.0, 3.0}};
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid ModelSpec: " + what); };
  if (input_height <= 0 || input_width <= 0 || input_height % 32 || input_width % 32) {
    fail("input size must be positive and divisible by 32");
  }
  if (seg_classes.size() < 2) fail("need at least 2 segmentation classes");
  if (det_classes.empty()) fail("need at least 1 detection class");
  if (anchors.empty()) fail("need at least 1 anchor");
  for (const auto& a : anchors) {
    if (!(a.w > 0 && a.h > 0)) fail("anchor sizes must be positive");
  }
  if (!(width_mult > 0 && width_mult <= 1)) fail("width_mult must lie in (0, 1]");
  for (Index b : base_widths) {
    if (b <= 0) fail("base widths must be positive");
  }
  for (int s : skip_strides) {
    if (s != 8 && s != 16) fail("skip strides must be a subset of {8, 16}");
  }
  if (!seg_head && !det_head) fail("at least one head is required");
  if (stem_kernel <= 0 || stem_kernel % 2 == 0) fail("stem kernel must be odd and positive");
  if (min_channels <= 0) fail("min_channels must be positive");
}

Index ModelSpec::width(int stage) const {
  const double scaled = std::ceil(static_cast<double>(base_widths.at(stage)) * width_mult - 1e-9);
  return std::max<Index>(min_channels, static_cast<Index>(scaled));
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  nlohmann::json anchors = nlohmann::json::array();
  for (const auto& a : s.anchors) anchors.push_back({a.w, a.h});
  nlohmann::json heads = nlohmann::json::array();
  if (s.seg_head) heads.push_back("seg");
  if (s.det_head) heads.push_back("det");
  j = nlohmann::json{{"input_size", {s.input_height, s.input_width}},
                     {"seg_classes", s.seg_classes},
                     {"det_classes", s.det_classes},
                     {"width_mult", s.width_mult},
                     {"base_widths", s.base_widths},
                     {"skip_strides", s.skip_strides},
                     {"anchors", anchors},
                     {"heads", heads},
                     {"stem_kernel", s.stem_kernel},
                     {"min_channels", s.min_channels}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s = ModelSpec{};
  if (j.contains("input_size")) {
    s.input_height = j.at("input_size").at(0).get<Index>();
    s.input_width = j.at("input_size").at(1).get<Index>();
  }
  if (j.contains("seg_classes")) s.seg_classes = j.at("seg_classes").get<std::vector<std::string>>();
  if (j.contains("det_classes")) s.det_classes = j.at("det_classes").get<std::vector<std::string>>();
  if (j.contains("width_mult")) s.width_mult = j.at("width_mult").get<double>();
  if (j.contains("base_widths")) s.base_widths = j.at("base_widths").get<std::array<Index, 4>>();
  if (j.contains("skip_strides")) s.skip_strides = j.at("skip_strides").get<std::set<int>>();
  if (j.contains("anchors")) {
    s.anchors.clear();
    for (const auto& a : j.at("anchors")) s.anchors.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
  }
  if (j.contains("heads")) {
    const auto heads = j.at("heads").get<std::set<std::string>>();
    for (const auto& h : heads) {
      if (h != "seg" && h != "det") throw std::invalid_argument("unknown head '" + h + "'");
    }
    s.seg_head = heads.count("seg") > 0;
    s.det_head = heads.count("det") > 0;
  }
  if (j.contains("stem_kernel")) s.stem_kernel = j.at("stem_kernel").get<Index>();
  if (j.contains("min_channels")) s.min_channels = j.at("min_channels").get<Index>();
  s.validate();
}

ModelSpec load_model_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open model spec " + path.string());
  return nlohmann::json::parse(is).get<ModelSpec>();
}

void save_model_spec(const std::filesystem::path& path, const ModelSpec& spec) {
  std::ofstream os(path);
  os << nlohmann::json(spec).dump(2) << '\n';
}

Index LayerInfo::param_count() const {
  switch (kind) {
    case LayerKind::conv:
    case LayerKind::deconv:
      return in_ch * out_ch * kernel * kernel + (has_bias ? out_ch : 0);
    case LayerKind::batchnorm:
      return 2 * out_ch;
  }
  return 0;
}

Index LayerInfo::macs() const {
  switch (kind) {
    case LayerKind::conv:
      return out_ch * out_h * out_w * in_ch * kernel * kernel;
    case LayerKind::deconv:
      return in_ch * in_h * in_w * out_ch * kernel * kernel;
    case LayerKind::batchnorm:
      return 0;
  }
  return 0;
}

std::vector<std::pair<int, int>> seg_upsample_chain(const ModelSpec& spec) {
  std::vector<std::pair<int, int>> chain;
  int current = 32;
  for (int s : {16, 8}) {
    if (spec.skip_strides.count(s)) {
      chain.emplace_back(current, s);
      current = s;
    }
  }
  chain.emplace_back(current, 1);
  return chain;
}

namespace {

std::string up_name(int from, int to) {
  return "seg.up" + std::to_string(from) + "to" + std::to_string(to);
}

struct TableBuilder {
  std::vector<LayerInfo> rows;
  Index h, w;  // current spatial size

  void conv(const std::string& name, Index in_ch, Index out_ch, Index k, Index s, Index p, bool bias) {
    LayerInfo l{name, LayerKind::conv, in_ch, out_ch, k, s, p, bias, h, w, 0, 0};
    l.out_h = (h + 2 * p - k) / s + 1;
    l.out_w = (w + 2 * p - k) / s + 1;
    rows.push_back(l);
    h = l.out_h;
    w = l.out_w;
  }
  void bn(const std::string& name, Index ch) {
    rows.push_back({name, LayerKind::batchnorm, ch, ch, 1, 1, 0, false, h, w, h, w});
  }
  void deconv(const std::string& name, Index ch, Index s) {
    LayerInfo l{name, LayerKind::deconv, ch, ch, 2 * s, s, s / 2, false, h, w, h * s, w * s};
    rows.push_back(l);
    h *= s;
    w *= s;
  }
};

}  // namespace

std::vector<LayerInfo> layer_table(const ModelSpec& spec) {
  spec.validate();
  TableBuilder t{{}, spec.input_height, spec.input_width};
  const Index k = spec.stem_kernel;
  t.conv("enc.stem.conv", 3, spec.width(0), k, 2, k / 2, false);
  t.bn("enc.stem.bn", spec.width(0));
  t.h = (t.h + 2 - 3) / 2 + 1;  // maxpool 3x3/2, pad 1
  t.w = (t.w + 2 - 3) / 2 + 1;

  std::array<std::pair<Index, Index>, 4> tap_size{};
  Index in_ch = spec.width(0);
  for (int b = 0; b < 4; ++b) {
    const std::string p = "enc.block" + std::to_string(b + 1);
    const Index out_ch = spec.width(b);
    const Index stride = b == 0 ? 1 : 2;
    const Index h0 = t.h, w0 = t.w;
    t.conv(p + ".conv1", in_ch, out_ch, 3, stride, 1, false);
    t.bn(p + ".bn1", out_ch);
    t.conv(p + ".conv2", out_ch, out_ch, 3, 1, 1, false);
    t.bn(p + ".bn2", out_ch);
    if (stride != 1 || in_ch != out_ch) {
      const Index h1 = t.h, w1 = t.w;
      t.h = h0;
      t.w = w0;
      t.conv(p + ".proj", in_ch, out_ch, 1, stride, 0, false);
      t.bn(p + ".proj_bn", out_ch);
      t.h = h1;
      t.w = w1;
    }
    tap_size[b] = {t.h, t.w};
    in_ch = out_ch;
  }

  const auto size_at = [&](int stride) {
    return tap_size[stride == 4 ? 0 : stride == 8 ? 1 : stride == 16 ? 2 : 3];
  };
  const auto width_at = [&](int stride) {
    return spec.width(stride == 8 ? 1 : stride == 16 ? 2 : 3);
  };
  if (spec.seg_head) {
    const Index c = spec.seg_channels();
    for (int s : {32, 16, 8}) {
      if (s != 32 && !spec.skip_strides.count(s)) continue;
      std::tie(t.h, t.w) = size_at(s);
      t.conv("seg.score" + std::to_string(s), width_at(s), c, 1, 1, 0, true);
    }
    for (auto [from, to] : seg_upsample_chain(spec)) {
      std::tie(t.h, t.w) = size_at(from);
      t.deconv(up_name(from, to), c, from / to);
    }
  }
  if (spec.det_head) {
    std::tie(t.h, t.w) = size_at(32);
    t.conv("det.conv", spec.width(3), spec.det_width(), 3, 1, 1, false);
    t.bn("det.bn", spec.det_width());
    t.conv("det.pred", spec.det_width(), spec.det_channels(), 1, 1, 0, true);
  }
  return std::move(t.rows);
}

bool is_buffer_name(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

std::map<std::string, Shape> parameter_inventory(const ModelSpec& spec) {
  std::map<std::string, Shape> inv;
  for (const auto& l : layer_table(spec)) {
    switch (l.kind) {
      case LayerKind::conv:
        inv[l.name + ".weight"] = {l.out_ch, l.in_ch, l.kernel, l.kernel};
        if (l.has_bias) inv[l.name + ".bias"] = {l.out_ch};
        break;
      case LayerKind::deconv:
        inv[l.name + ".weight"] = {l.in_ch, l.out_ch, l.kernel, l.kernel};
        break;
      case LayerKind::batchnorm:
        for (const char* field : {".gamma", ".beta", ".running_mean", ".running_var"}) {
          inv[l.name + field] = {l.out_ch};
        }
        break;
    }
  }
  return inv;
}

template <typename Scalar>
void ModelParams<Scalar>::insert(const std::string& name, Tensor<Scalar> t) {
  if (!tensors_.emplace(name, std::move(t)).second) {
    throw std::invalid_argument("duplicate parameter name " + name);
  }
}

template <typename Scalar>
Tensor<Scalar>& ModelParams<Scalar>::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <typename Scalar>
const Tensor<Scalar>& ModelParams<Scalar>::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <typename Scalar>
std::vector<std::string> ModelParams<Scalar>::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : tensors_) {
    if (!is_buffer_name(name)) names.push_back(name);
  }
  return names;
}

template <typename Scalar>
Index ModelParams<Scalar>::trainable_count() const {
  Index n = 0;
  for (const auto& name : trainable_names()) n += tensors_.at(name).numel();
  return n;
}

template <typename Scalar>
void ModelParams<Scalar>::zero_grad() {
  for (auto& [name, t] : tensors_) t.zero_grad();
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::clone() const {
  ModelParams out;
  for (const auto& [name, t] : tensors_) out.insert(name, t.clone());
  return out;
}

namespace {
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace

template <typename Scalar>
ModelParams<Scalar> build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams<Scalar> params;
  for (const auto& l : layer_table(spec)) {
    const auto fill_normal = [&](const std::string& name, const Shape& shape, double stddev) {
      Rng rng = Rng::keyed(seed, fnv1a(name), 0);
      Buffer<Scalar> data(numel_of(shape));
      for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(stddev * rng.normal());
      params.insert(name, Tensor<Scalar>(shape, std::move(data), true));
    };
    switch (l.kind) {
      case LayerKind::conv:
        fill_normal(l.name + ".weight", {l.out_ch, l.in_ch, l.kernel, l.kernel},
                    std::sqrt(2.0 / double(l.in_ch * l.kernel * l.kernel)));
        if (l.has_bias) params.insert(l.name + ".bias", Tensor<Scalar>::zeros({l.out_ch}, true));
        break;
      case LayerKind::deconv: {
        // fan_in from the weight layout [C_in, C_out, k, k]: C_out * k * k.
        const double fan_in = double(l.out_ch * l.kernel * l.kernel);
        fill_normal(l.name + ".weight", {l.in_ch, l.out_ch, l.kernel, l.kernel}, std::sqrt(2.0 / fan_in));
        break;
      }
      case LayerKind::batchnorm:
        params.insert(l.name + ".gamma", Tensor<Scalar>::full({l.out_ch}, 1, true));
        params.insert(l.name + ".beta", Tensor<Scalar>::zeros({l.out_ch}, true));
        params.insert(l.name + ".running_mean", Tensor<Scalar>::zeros({l.out_ch}));
        params.insert(l.name + ".running_var", Tensor<Scalar>::full({l.out_ch}, 1));
        break;
    }
  }
  return params;
}

template <typename Scalar>
void check_inventory(const ModelParams<Scalar>& params, const ModelSpec& spec) {
  const auto inv = parameter_inventory(spec);
  for (const auto& [name, shape] : inv) {
    if (!params.contains(name)) throw std::invalid_argument("missing parameter " + name);
    if (params.at(name).shape() != shape) {
      throw std::invalid_argument("parameter " + name + " has shape " +
                                  shape_str(params.at(name).shape()) + ", expected " + shape_str(shape));
    }
  }
  for (const auto& [name, t] : params.tensors()) {
    if (!inv.count(name)) throw std::invalid_argument("unexpected parameter " + name);
  }
}

namespace {

template <typename Scalar>
struct Runner {
  ModelParams<Scalar>& params;
  BatchNormMode mode;
  ForwardTrace* trace;

  Tensor<Scalar> conv(const std::string& name, const Tensor<Scalar>& x, Index stride, Index pad) {
    const Tensor<Scalar>& w = params.at(name + ".weight");
    ConvSpec spec;
    spec.in_ch = w.dim(1);
    spec.out_ch = w.dim(0);
    spec.kernel = {w.dim(2), w.dim(3)};
    spec.stride = {stride, stride};
    spec.padding = {pad, pad};
    spec.has_bias = params.contains(name + ".bias");
    Tensor<Scalar> bias = spec.has_bias ? params.at(name + ".bias") : Tensor<Scalar>{};
    Tensor<Scalar> y = conv2d(x, w, bias, spec);
    if (trace) trace->push_back({name, LayerKind::conv, x.shape(), y.shape()});
    return y;
  }

  Tensor<Scalar> bn(const std::string& name, const Tensor<Scalar>& x) {
    BatchNormState<Scalar> state{params.at(name + ".running_mean"), params.at(name + ".running_var")};
    Tensor<Scalar> y = batchnorm2d(x, params.at(name + ".gamma"), params.at(name + ".beta"), state, mode);
    if (trace) trace->push_back({name, LayerKind::batchnorm, x.shape(), y.shape()});
    return y;
  }

  Tensor<Scalar> deconv(const std::string& name, const Tensor<Scalar>& x, Index stride) {
    Tensor<Scalar> y = deconv2d(x, params.at(name + ".weight"), stride);
    if (trace) trace->push_back({name, LayerKind::deconv, x.shape(), y.shape()});
    return y;
  }

  Tensor<Scalar> basic_block(const std::string& p, const Tensor<Scalar>& x, Index stride) {
    Tensor<Scalar> y = relu(bn(p + ".bn1", conv(p + ".conv1", x, stride, 1)));
    y = bn(p + ".bn2", conv(p + ".conv2", y, 1, 1));
    Tensor<Scalar> shortcut =
        params.contains(p + ".proj.weight") ? bn(p + ".proj_bn", conv(p + ".proj", x, stride, 0)) : x;
    return relu(add(y, shortcut));
  }
};

void require_head(bool present, const char* head) {
  if (!present) throw std::logic_error(std::string(head) + " head is not part of this model");
}

}  // namespace

template <typename Scalar>
EncoderFeatures<Scalar> forward_encoder(ModelParams<Scalar>& params, const ModelSpec& spec,
                                        const Tensor<Scalar>& x, BatchNormMode mode,
                                        ForwardTrace* trace) {
  if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) % 32 || x.dim(3) % 32) {
    throw ShapeError("encoder input must be [N,3,H,W] with H, W divisible by 32, got " +
                     shape_str(x.shape()));
  }
  Runner<Scalar> run{params, mode, trace};
  Tensor<Scalar> y = relu(run.bn("enc.stem.bn", run.conv("enc.stem.conv", x, 2, spec.stem_kernel / 2)));
  y = maxpool2d(y, 3, 2, 1);
  EncoderFeatures<Scalar> f;
  f.f4 = run.basic_block("enc.block1", y, 1);
  f.f8 = run.basic_block("enc.block2", f.f4, 2);
  f.f16 = run.basic_block("enc.block3", f.f8, 2);
  f.f32 = run.basic_block("enc.block4", f.f16, 2);
  return f;
}

template <typename Scalar>
Tensor<Scalar> forward_seg(ModelParams<Scalar>& params, const ModelSpec& spec,
                           const EncoderFeatures<Scalar>& feats, ForwardTrace* trace) {
  require_head(spec.seg_head, "segmentation");
  Runner<Scalar> run{params, BatchNormMode::eval, trace};
  Tensor<Scalar> path = run.conv("seg.score32", feats.f32, 1, 0);
  for (auto [from, to] : seg_upsample_chain(spec)) {
    path = run.deconv(up_name(from, to), path, from / to);
    if (to == 16) path = add(path, run.conv("seg.score16", feats.f16, 1, 0));
    if (to == 8) path = add(path, run.conv("seg.score8", feats.f8, 1, 0));
  }
  return path;
}

template <typename Scalar>
Tensor<Scalar> forward_det(ModelParams<Scalar>& params, const ModelSpec& spec,
                           const EncoderFeatures<Scalar>& feats, BatchNormMode mode,
                           ForwardTrace* trace) {
  require_head(spec.det_head, "detection");
  Runner<Scalar> run{params, mode, trace};
  Tensor<Scalar> y = relu(run.bn("det.bn", run.conv("det.conv", feats.f32, 1, 1)));
  return run.conv("det.pred", y, 1, 0);
}

namespace {
constexpr char kCheckpointMagic[4] = {'M', 'T', 'L', 'W'};
}

template <typename Scalar>
void write_checkpoint(std::ostream& os, const ModelParams<Scalar>& params) {
  os.write(kCheckpointMagic, 4);
  le::put_u32(os, kCheckpointVersion);
  le::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.tensors()) {
    if (name.size() > 0xFFFF) throw FormatError("parameter name too long");
    le::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  if (!os) throw FormatError("failed to write checkpoint");
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Scalar>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, params);
}

template <typename Scalar>
ModelParams<Scalar> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw FormatError("bad checkpoint magic");
  }
  const std::uint32_t version = le::get_u32(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::uint32_t count = le::get_u32(is);
  ModelParams<Scalar> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(le::get_u16(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) {
      throw FormatError("truncated checkpoint entry name");
    }
    Tensor<Scalar> t = read_tensor<Scalar>(is);
    t.set_requires_grad(!is_buffer_name(name));
    params.insert(name, std::move(t));
  }
  return params;
}

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_checkpoint<Scalar>(is);
}

#define MTLNET_INSTANTIATE_MODEL(S)                                                              \
  template class ModelParams<S>;                                                                 \
  template ModelParams<S> build(const ModelSpec&, std::uint64_t);                                \
  template void check_inventory(const ModelParams<S>&, const ModelSpec&);                        \
  template EncoderFeatures<S> forward_encoder(ModelParams<S>&, const ModelSpec&, const Tensor<S>&, \
                                              BatchNormMode, ForwardTrace*);                     \
  template Tensor<S> forward_seg(ModelParams<S>&, const ModelSpec&, const EncoderFeatures<S>&,   \
                                 ForwardTrace*);                                                 \
  template Tensor<S> forward_det(ModelParams<S>&, const ModelSpec&, const EncoderFeatures<S>&,   \
                                 BatchNormMode, ForwardTrace*);                                  \
  template void write_checkpoint(std::ostream&, const ModelParams<S>&);                          \
  template void save_checkpoint(const std::filesystem::path&, const ModelParams<S>&);            \
  template ModelParams<S> read_checkpoint(std::istream&);                                        \
  template ModelParams<S> load_checkpoint(const std::filesystem::path&);

MTLNET_INSTANTIATE_MODEL(float)
MTLNET_INSTANTIATE_MODEL(double)

}  // namespace mtlnet
