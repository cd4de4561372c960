#include "mtlnet/data.hpp"

#include "mtlnet/hash.hpp"
#include "mtlnet/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace mtlnet {

namespace {

constexpr std::uint64_t kLayoutStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

struct Rgb {
  int r, g, b;
};

struct Placed {
  int class_idx;
  Index x1, y1, x2, y2;  // pixel bounds, exclusive max
  Rgb body, detail;
};

const char* variant_name(RoadwayVariant v) { return v == RoadwayVariant::kitti3 ? "kitti3" : "fisheye4"; }

RoadwayVariant parse_variant(const std::string& s) {
  if (s == "kitti3") return RoadwayVariant::kitti3;
  if (s == "fisheye4") return RoadwayVariant::fisheye4;
  throw std::invalid_argument("unknown roadway variant '" + s + "'");
}

void check_range(const SizeRange& r, const char* what, double lo, double hi) {
  if (!(r.min >= lo && r.max <= hi && r.min <= r.max)) {
    throw std::invalid_argument(std::string("scene config: bad ") + what + " range");
  }
}

int channel(Rng& rng, int lo, int hi) { return static_cast<int>(rng.uniform_int(lo, hi)); }

// Inside tests on pixel centres (x + 0.5, y + 0.5), relative to the box.
bool inside_ellipse(const Placed& o, Index x, Index y) {
  const double rx = double(o.x2 - o.x1) / 2, ry = double(o.y2 - o.y1) / 2;
  const double dx = (double(x) + 0.5 - double(o.x1) - rx) / rx;
  const double dy = (double(y) + 0.5 - double(o.y1) - ry) / ry;
  return dx * dx + dy * dy <= 1.0;
}

// Cyclist glyph: two wheels along the bottom edge plus a rider bar.
// Returns 0 outside, 1 wheel, 2 rider.
int cyclist_part(const Placed& o, Index x, Index y) {
  const double w = double(o.x2 - o.x1), h = double(o.y2 - o.y1);
  const double rw = std::min(w / 4, h * 0.28);
  const double px = double(x) + 0.5, py = double(y) + 0.5;
  const double wy = double(o.y2) - rw;
  for (const double wx : {double(o.x1) + rw, double(o.x2) - rw}) {
    const double dx = px - wx, dy = py - wy;
    if (dx * dx + dy * dy <= rw * rw) return 1;
  }
  const double bar = std::max(2.0, w / 5);
  const double mid = double(o.x1) + w / 2;
  if (std::abs(px - mid) <= bar / 2 && py >= double(o.y1) && py <= wy) return 2;
  return 0;
}

bool overlaps(const Placed& a, const Placed& b) {
  return a.x1 < b.x2 + 1 && b.x1 < a.x2 + 1 && a.y1 < b.y2 + 1 && b.y1 < a.y2 + 1;
}

std::string dump_ppm(const RgbImage& image) {
  std::ostringstream ss;
  write_ppm(ss, image);
  return ss.str();
}

std::string dump_pgm(const GrayImage& image) {
  std::ostringstream ss;
  write_pgm(ss, image);
  return ss.str();
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw std::runtime_error("cannot write " + path.string());
  }
}

}  // namespace

void SceneConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw std::invalid_argument("scene size must be positive multiples of 32");
  }
  if (!(horizon_fraction >= 0 && horizon_fraction < 1)) {
    throw std::invalid_argument("horizon_fraction must be in [0, 1)");
  }
  if (!(noise >= 0 && noise <= 1)) throw std::invalid_argument("noise must be in [0, 1]");
  for (const auto& c : object_counts) {
    if (c[0] < 0 || c[1] < c[0]) throw std::invalid_argument("scene config: bad object count range");
  }
  for (const auto& h : object_heights) check_range(h, "object height", 0.02, 1.0);
  check_range(road_bottom_width, "road_bottom_width", 0, 4);
  check_range(road_top_width, "road_top_width", 0, 4);
  check_range(road_center_shift, "road_center_shift", -1, 1);
  check_range(sidewalk_width, "sidewalk_width", 0, 4);
  if (min_center_separation < 0) throw std::invalid_argument("min_center_separation must be >= 0");
  if (max_placement_retries < 1) throw std::invalid_argument("max_placement_retries must be >= 1");
}

Index SceneConfig::horizon_row() const {
  return static_cast<Index>(std::floor(horizon_fraction * double(height)));
}

std::vector<std::string> SceneConfig::seg_classes() const {
  if (variant == RoadwayVariant::kitti3) return {"background", "road", "sidewalk"};
  return {"background", "road", "lane", "curb"};
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  const auto names = SceneConfig::det_classes();
  nlohmann::json counts, heights;
  for (std::size_t k = 0; k < 3; ++k) {
    counts[names[k]] = {c.object_counts[k][0], c.object_counts[k][1]};
    heights[names[k]] = {c.object_heights[k].min, c.object_heights[k].max};
  }
  auto range = [](const SizeRange& r) { return nlohmann::json{r.min, r.max}; };
  j = {{"seed", c.seed},
       {"height", c.height},
       {"width", c.width},
       {"variant", variant_name(c.variant)},
       {"object_counts", counts},
       {"object_heights", heights},
       {"horizon_fraction", c.horizon_fraction},
       {"noise", c.noise},
       {"road_bottom_width", range(c.road_bottom_width)},
       {"road_top_width", range(c.road_top_width)},
       {"road_center_shift", range(c.road_center_shift)},
       {"sidewalk_width", range(c.sidewalk_width)},
       {"min_center_separation", c.min_center_separation},
       {"max_placement_retries", c.max_placement_retries}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  c = SceneConfig{};
  auto range = [&](const char* key, SizeRange& r) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 2) throw std::invalid_argument(std::string(key) + " must be [min, max]");
    r = {v[0], v[1]};
  };
  c.seed = j.value("seed", c.seed);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  const auto names = SceneConfig::det_classes();
  for (std::size_t k = 0; k < 3; ++k) {
    if (j.contains("object_counts") && j.at("object_counts").contains(names[k])) {
      const auto v = j.at("object_counts").at(names[k]).get<std::vector<int>>();
      if (v.size() != 2) throw std::invalid_argument("object_counts entries must be [min, max]");
      c.object_counts[k] = {v[0], v[1]};
    }
    if (j.contains("object_heights") && j.at("object_heights").contains(names[k])) {
      const auto v = j.at("object_heights").at(names[k]).get<std::vector<double>>();
      if (v.size() != 2) throw std::invalid_argument("object_heights entries must be [min, max]");
      c.object_heights[k] = {v[0], v[1]};
    }
  }
  c.horizon_fraction = j.value("horizon_fraction", c.horizon_fraction);
  c.noise = j.value("noise", c.noise);
  range("road_bottom_width", c.road_bottom_width);
  range("road_top_width", c.road_top_width);
  range("road_center_shift", c.road_center_shift);
  range("sidewalk_width", c.sidewalk_width);
  c.min_center_separation = j.value("min_center_separation", c.min_center_separation);
  c.max_placement_retries = j.value("max_placement_retries", c.max_placement_retries);
  c.validate();
}

std::string sample_id(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(index));
  return buf;
}

Sample generate(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  const Index H = cfg.height, W = cfg.width, hr = cfg.horizon_row();
  Rng rng = Rng::keyed(cfg.seed, kLayoutStream, index);

  // Road geometry: centre line and half-width interpolate linearly from the
  // horizon row down to the bottom edge.
  const double top_center = double(W) * (0.5 + rng.uniform(cfg.road_center_shift.min, cfg.road_center_shift.max));
  const double bottom_center = double(W) * (0.5 + rng.uniform(cfg.road_center_shift.min, cfg.road_center_shift.max) / 2);
  const double bottom_half = double(W) * rng.uniform(cfg.road_bottom_width.min, cfg.road_bottom_width.max) / 2;
  const double top_half = double(W) * rng.uniform(cfg.road_top_width.min, cfg.road_top_width.max) / 2;
  const double side_bottom = double(W) * rng.uniform(cfg.sidewalk_width.min, cfg.sidewalk_width.max);
  const double side_top = bottom_half > 0 ? side_bottom * top_half / bottom_half : 0.0;

  const Rgb sky{channel(rng, 100, 140), channel(rng, 140, 175), channel(rng, 190, 235)};
  const Rgb ground{channel(rng, 60, 90), channel(rng, 90, 120), channel(rng, 50, 70)};
  const Rgb road{channel(rng, 70, 95), channel(rng, 70, 95), channel(rng, 75, 100)};
  const Rgb side{channel(rng, 160, 190), channel(rng, 140, 165), channel(rng, 120, 140)};
  const Rgb lane{channel(rng, 220, 245), channel(rng, 220, 245), channel(rng, 210, 235)};
  const Rgb curb{channel(rng, 180, 215), channel(rng, 40, 70), channel(rng, 40, 70)};
  const bool four = cfg.variant == RoadwayVariant::fisheye4;

  Sample s;
  s.image_id = sample_id(index);
  s.image = RgbImage(W, H);
  s.seg = GrayImage(W, H, 0);
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      Rgb c = sky;
      std::uint8_t label = 0;
      if (y < hr) {
        // Sky brightens towards the horizon.
        const int lift = static_cast<int>(30 * y / std::max<Index>(hr, 1));
        c = {sky.r + lift, sky.g + lift, std::min(255, sky.b + lift / 2)};
      } else {
        c = ground;
        const double t = (double(y) + 0.5 - double(hr)) / double(H - hr);
        const double center = top_center + t * (bottom_center - top_center);
        const double half = top_half + t * (bottom_half - top_half);
        const double sw = side_top + t * (side_bottom - side_top);
        const double d = std::abs(double(x) + 0.5 - center);
        if (d <= half) {
          c = road;
          label = 1;
          if (four && d <= half * 0.03 + 0.5 && static_cast<int>(t * 12) % 2 == 0) {
            c = lane;
            label = 2;
          }
        } else if (four && d <= half + sw * 0.35) {
          c = curb;
          label = 3;
        } else if (!four && d <= half + sw) {
          c = side;
          label = 2;
        }
      }
      s.image.at(x, y, 0) = static_cast<std::uint8_t>(c.r);
      s.image.at(x, y, 1) = static_cast<std::uint8_t>(c.g);
      s.image.at(x, y, 2) = static_cast<std::uint8_t>(c.b);
      s.seg.at(x, y) = label;
    }
  }

  static constexpr std::array<std::array<double, 2>, 3> kAspect{{{1.3, 2.0}, {0.35, 0.5}, {0.8, 1.1}}};
  std::vector<Placed> placed;
  for (int cls = 0; cls < 3; ++cls) {
    const int count = static_cast<int>(rng.uniform_int(cfg.object_counts[cls][0], cfg.object_counts[cls][1]));
    for (int n = 0; n < count; ++n) {
      bool ok = false;
      for (int attempt = 0; attempt < cfg.max_placement_retries && !ok; ++attempt) {
        const Index h = std::max<Index>(4, std::lround(double(H) * rng.uniform(cfg.object_heights[cls].min, cfg.object_heights[cls].max)));
        const Index w = std::max<Index>(3, std::lround(double(h) * rng.uniform(kAspect[cls][0], kAspect[cls][1])));
        if (w > W || h > H) continue;
        const Index x1 = rng.uniform_int(0, W - w);
        const Index y2 = rng.uniform_int(std::min(H, std::max(h, hr + h / 3)), H);
        Placed o{cls, x1, y2 - h, x1 + w, y2, {}, {}};
        const double cx = double(o.x1 + o.x2) / 2, cy = double(o.y1 + o.y2) / 2;
        ok = std::none_of(placed.begin(), placed.end(), [&](const Placed& p) {
          const double dx = double(p.x1 + p.x2) / 2 - cx, dy = double(p.y1 + p.y2) / 2 - cy;
          return overlaps(o, p) || dx * dx + dy * dy < cfg.min_center_separation * cfg.min_center_separation;
        });
        if (!ok) continue;
        if (cls == 0) {
          o.body = {channel(rng, 120, 240), channel(rng, 20, 90), channel(rng, 20, 90)};
          o.detail = {channel(rng, 20, 50), channel(rng, 30, 60), channel(rng, 60, 90)};
        } else if (cls == 1) {
          o.body = {channel(rng, 200, 240), channel(rng, 150, 190), channel(rng, 20, 60)};
          o.detail = o.body;
        } else {
          o.body = {channel(rng, 20, 45), channel(rng, 20, 45), channel(rng, 20, 45)};
          o.detail = {channel(rng, 30, 70), channel(rng, 180, 230), channel(rng, 200, 240)};
        }
        placed.push_back(o);
      }
      if (!ok) ++s.dropped_objects;
    }
  }

  for (const Placed& o : placed) {
    const Index window_bottom = o.y1 + (o.y2 - o.y1) * 2 / 5;
    for (Index y = o.y1; y < o.y2; ++y) {
      for (Index x = o.x1; x < o.x2; ++x) {
        const Rgb* c = nullptr;
        if (o.class_idx == 0) {
          c = y < window_bottom && x > o.x1 + 1 && x < o.x2 - 2 ? &o.detail : &o.body;
        } else if (o.class_idx == 1) {
          if (inside_ellipse(o, x, y)) c = &o.body;
        } else {
          const int part = cyclist_part(o, x, y);
          if (part) c = part == 1 ? &o.body : &o.detail;
        }
        if (!c) continue;
        s.image.at(x, y, 0) = static_cast<std::uint8_t>(c->r);
        s.image.at(x, y, 1) = static_cast<std::uint8_t>(c->g);
        s.image.at(x, y, 2) = static_cast<std::uint8_t>(c->b);
        s.seg.at(x, y) = 0;
      }
    }
    s.boxes.push_back(to_normalized(o.class_idx, Box{double(o.x1), double(o.y1), double(o.x2), double(o.y2)},
                                    double(W), double(H)));
  }

  if (cfg.noise > 0) {
    Rng noise = Rng::keyed(cfg.seed, kNoiseStream, index);
    const double amp = cfg.noise * 255;
    for (auto& v : s.image.pixels) {
      // Triangular noise on [-amp, amp].
      const double n = (noise.uniform() + noise.uniform() - 1) * amp;
      v = static_cast<std::uint8_t>(std::clamp<long>(std::lround(double(v) + n), 0, 255));
    }
  }
  return s;
}

std::vector<LabeledBox> labeled_boxes(const std::vector<GtBox>& boxes, Index image_w, Index image_h) {
  std::vector<LabeledBox> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back({b.class_idx, to_pixel_box(b, double(image_w), double(image_h))});
  return out;
}

std::string boxes_to_jsonl(const std::vector<GtBox>& boxes, const std::vector<std::string>& class_names) {
  std::string out;
  for (const auto& b : boxes) {
    if (b.class_idx < 0 || b.class_idx >= static_cast<int>(class_names.size())) {
      throw std::invalid_argument("box class index out of range");
    }
    nlohmann::json j = {{"class", class_names[b.class_idx]}, {"class_idx", b.class_idx},
                        {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<GtBox> boxes_from_jsonl(std::string_view text, const std::vector<std::string>& class_names) {
  std::vector<GtBox> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    GtBox b;
    const std::string name = j.at("class").get<std::string>();
    const auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) throw std::invalid_argument("unknown box class '" + name + "'");
    b.class_idx = static_cast<int>(it - class_names.begin());
    b.cx = j.at("cx").get<double>();
    b.cy = j.at("cy").get<double>();
    b.w = j.at("w").get<double>();
    b.h = j.at("h").get<double>();
    out.push_back(b);
  }
  return out;
}

void to_json(nlohmann::json& j, const DatasetMeta& m) {
  nlohmann::json sums = nlohmann::json::object();
  for (const auto& [path, sha] : m.checksums) sums[path] = sha;
  j = {{"schema", "mtlnet.dataset/1"},
       {"config", m.config},
       {"count", m.count},
       {"seg_classes", m.seg_classes},
       {"det_classes", m.det_classes},
       {"dropped_objects", m.dropped_objects},
       {"checksums", sums}};
}

void from_json(const nlohmann::json& j, DatasetMeta& m) {
  if (j.value("schema", "") != "mtlnet.dataset/1") throw std::invalid_argument("not a dataset meta.json");
  m.config = j.at("config").get<SceneConfig>();
  m.count = j.at("count").get<Index>();
  m.seg_classes = j.at("seg_classes").get<std::vector<std::string>>();
  m.det_classes = j.at("det_classes").get<std::vector<std::string>>();
  m.dropped_objects = j.value("dropped_objects", 0);
  m.checksums.clear();
  for (const auto& [path, sha] : j.at("checksums").items()) m.checksums.emplace_back(path, sha.get<std::string>());
}

DatasetMeta write_dataset(const std::filesystem::path& dir, const SceneConfig& cfg, Index count) {
  cfg.validate();
  if (count < 0) throw std::invalid_argument("dataset count must be >= 0");
  namespace fs = std::filesystem;
  for (const char* sub : {"images", "seg", "boxes"}) fs::create_directories(dir / sub);
  DatasetMeta meta;
  meta.config = cfg;
  meta.count = count;
  meta.seg_classes = cfg.seg_classes();
  meta.det_classes = SceneConfig::det_classes();

  constexpr Index kChunk = 64;
  std::vector<std::pair<std::string, std::string>> sums;
  for (Index begin = 0; begin < count; begin += kChunk) {
    const Index n = std::min(kChunk, count - begin);
    std::vector<std::array<std::string, 3>> files(static_cast<std::size_t>(n));
    std::vector<int> dropped(static_cast<std::size_t>(n));
    parallel_for(n, [&](Index i) {
      const Sample s = generate(cfg, static_cast<std::uint64_t>(begin + i));
      files[i] = {dump_ppm(s.image), dump_pgm(s.seg), boxes_to_jsonl(s.boxes, meta.det_classes)};
      dropped[i] = s.dropped_objects;
    });
    for (Index i = 0; i < n; ++i) {
      const std::string id = sample_id(static_cast<std::uint64_t>(begin + i));
      const std::array<std::string, 3> rel{"images/" + id + ".ppm", "seg/" + id + ".pgm", "boxes/" + id + ".jsonl"};
      for (int f = 0; f < 3; ++f) {
        write_bytes(dir / rel[f], files[i][f]);
        sums.emplace_back(rel[f], git_blob_sha1(files[i][f]));
      }
      meta.dropped_objects += dropped[i];
    }
  }
  std::sort(sums.begin(), sums.end());
  meta.checksums = std::move(sums);
  std::ofstream out(dir / "meta.json");
  out << nlohmann::json(meta).dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
  return meta;
}

Dataset load_dataset_prefix(const std::filesystem::path& dir, Index limit, bool verify) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw std::runtime_error("no dataset at " + dir.string() + " (missing meta.json)");
  Dataset ds;
  ds.meta = nlohmann::json::parse(in).get<DatasetMeta>();
  const Index n = limit > 0 ? std::min(limit, ds.meta.count) : ds.meta.count;
  std::map<std::string, std::string> expected(ds.meta.checksums.begin(), ds.meta.checksums.end());
  auto load = [&](const std::string& rel) {
    std::string bytes = read_file_bytes(dir / rel);
    if (verify) {
      const auto it = expected.find(rel);
      if (it == expected.end() || it->second != git_blob_sha1(bytes)) {
        throw std::runtime_error("checksum mismatch for " + (dir / rel).string());
      }
    }
    return bytes;
  };
  ds.samples.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Sample& s = ds.samples[i];
    s.image_id = sample_id(static_cast<std::uint64_t>(i));
    std::istringstream img(load("images/" + s.image_id + ".ppm"));
    s.image = read_ppm(img);
    std::istringstream seg(load("seg/" + s.image_id + ".pgm"));
    s.seg = read_pgm(seg);
    s.boxes = boxes_from_jsonl(load("boxes/" + s.image_id + ".jsonl"), ds.meta.det_classes);
  }
  return ds;
}

Dataset load_dataset(const std::filesystem::path& dir, bool verify) { return load_dataset_prefix(dir, 0, verify); }

namespace {

double parse_double(std::string_view field, const char* what) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw LabelParseError(std::string("KITTI label: non-numeric ") + what + " '" + std::string(field) + "'");
  }
  return v;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

KittiLabel parse_kitti_label(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) f.push_back(line.substr(start, i - start));
  }
  if (f.size() != 15) {
    throw LabelParseError("KITTI label: expected 15 fields, found " + std::to_string(f.size()));
  }
  KittiLabel l;
  l.type = std::string(f[0]);
  l.truncated = parse_double(f[1], "truncated");
  const double occ = parse_double(f[2], "occluded");
  if (occ != std::floor(occ)) throw LabelParseError("KITTI label: occluded must be an integer");
  l.occluded = static_cast<int>(occ);
  l.alpha = parse_double(f[3], "alpha");
  l.box = {parse_double(f[4], "x1"), parse_double(f[5], "y1"), parse_double(f[6], "x2"), parse_double(f[7], "y2")};
  for (int k = 0; k < 3; ++k) l.dimensions[k] = parse_double(f[8 + k], "dimension");
  for (int k = 0; k < 3; ++k) l.location[k] = parse_double(f[11 + k], "location");
  l.rotation_y = parse_double(f[14], "rotation_y");
  return l;
}

std::string emit_kitti_label(const KittiLabel& l) {
  std::string out = l.type;
  auto put = [&](double v) {
    out += ' ';
    out += fmt(v);
  };
  put(l.truncated);
  out += ' ' + std::to_string(l.occluded);
  put(l.alpha);
  for (double v : {l.box.x1, l.box.y1, l.box.x2, l.box.y2}) put(v);
  for (double v : l.dimensions) put(v);
  for (double v : l.location) put(v);
  put(l.rotation_y);
  return out;
}

std::vector<KittiLabel> parse_kitti_file(std::string_view text) {
  std::vector<KittiLabel> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) out.push_back(parse_kitti_label(line));
    pos = end + 1;
  }
  return out;
}

std::vector<GtBox> kitti_to_targets(const std::vector<KittiLabel>& labels,
                                    const std::vector<std::string>& class_names, Index image_w,
                                    Index image_h) {
  std::vector<GtBox> out;
  for (const auto& l : labels) {
    if (l.dont_care()) continue;
    const auto it = std::find(class_names.begin(), class_names.end(), l.type);
    if (it == class_names.end()) continue;
    Box b{std::clamp(l.box.x1, 0.0, double(image_w)), std::clamp(l.box.y1, 0.0, double(image_h)),
          std::clamp(l.box.x2, 0.0, double(image_w)), std::clamp(l.box.y2, 0.0, double(image_h))};
    if (b.width() < 1 || b.height() < 1) continue;
    out.push_back(to_normalized(static_cast<int>(it - class_names.begin()), b, double(image_w), double(image_h)));
  }
  return out;
}

}  // namespace mtlnet
