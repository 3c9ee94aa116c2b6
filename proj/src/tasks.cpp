#include "metadock/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace metadock::tasks {

using nlohmann::json;

namespace {

constexpr int kRawFormatVersion = 1;
constexpr int kShapeKinds = 8;

std::vector<std::size_t> draw_without_replacement(std::size_t population, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(population);
  for (std::size_t i = 0; i < population; ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  return idx;
}

double shape_membership(int shape, double dx, double dy, double r) {
  const double d = std::hypot(dx, dy);
  switch (shape) {
    case 0:
      return d < r ? 1.0 : 0.0;
    case 1:
      return std::max(std::abs(dx), std::abs(dy)) < 0.85 * r ? 1.0 : 0.0;
    case 2:
      return ((std::abs(dx) < 0.3 * r && std::abs(dy) < r) || (std::abs(dy) < 0.3 * r && std::abs(dx) < r)) ? 1.0
                                                                                                               : 0.0;
    case 3:
      return std::abs(d - 0.75 * r) < 0.3 * r ? 1.0 : 0.0;
    case 4:
      return (std::abs(dy) < 0.35 * r && std::abs(dx) < 1.2 * r) ? 1.0 : 0.0;
    case 5:
      return (std::abs(dx - dy) / std::numbers::sqrt2 < 0.35 * r && d < 1.2 * r) ? 1.0 : 0.0;
    case 6:
      return (dy > -0.8 * r && dy < 0.8 * r && std::abs(dx) < (dy + 0.8 * r) * 0.6) ? 1.0 : 0.0;
    default: {
      for (double sx : {-0.5, 0.5}) {
        for (double sy : {-0.5, 0.5}) {
          if (std::hypot(dx - sx * r, dy - sy * r) < 0.3 * r) return 1.0;
        }
      }
      return 0.0;
    }
  }
}

SynthClassParams random_class(std::uint64_t seed, int image_size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SynthClassParams p;
  p.shape = static_cast<int>(std::uniform_int_distribution<int>(0, kShapeKinds - 1)(rng));
  for (auto& c : p.foreground) c = 0.4 + 0.5 * unit(rng);
  for (auto& c : p.background) c = 0.1 + 0.3 * unit(rng);
  p.texture_frequency = 0.5 + 2.5 * unit(rng);
  p.texture_angle = std::numbers::pi * unit(rng);
  const double scale = static_cast<double>(image_size) / 16.0;
  p.size = scale * (4.0 + 3.0 * unit(rng));
  p.jitter = scale * 3.0;
  p.seed = std::uniform_int_distribution<std::uint64_t>()(rng);
  return p;
}

ClassPool synth_split(Split split, int first_id, int count, std::uint64_t seed, const SynthOptions& opt) {
  std::vector<ClassDescriptor> classes;
  for (int c = 0; c < count; ++c) {
    const int id = first_id + c;
    ClassDescriptor d;
    d.global_id = id;
    d.sample_count = opt.samples_per_class;
    d.synth = random_class(derive_seed(seed, static_cast<std::uint64_t>(id), 0xC1A55), opt.image_size);
    classes.push_back(d);
  }
  return ClassPool(split, opt.channels, opt.image_size, opt.image_size, std::move(classes));
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::kMetaTrain:
      return "meta-train";
    case Split::kMetaVal:
      return "meta-val";
    case Split::kMetaTest:
      return "meta-test";
  }
  return "unknown";
}

Split parse_split(const std::string& text) {
  if (text == "meta-train") return Split::kMetaTrain;
  if (text == "meta-val") return Split::kMetaVal;
  if (text == "meta-test") return Split::kMetaTest;
  throw std::invalid_argument("unknown split '" + text + "'");
}

void EpisodeSpec::validate() const {
  if (n_way < 2) throw std::invalid_argument("n_way must be >= 2, got " + std::to_string(n_way));
  if (k_shot < 1) throw std::invalid_argument("k_shot must be >= 1, got " + std::to_string(k_shot));
  if (query_per_class < 1) throw std::invalid_argument("query_per_class must be >= 1");
  if (image_size < 1 || channels < 1) throw std::invalid_argument("image_size and channels must be positive");
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ std::rotl(b, 17));
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

ClassPool::ClassPool(Split split, int channels, int height, int width, std::vector<ClassDescriptor> classes,
                     std::shared_ptr<const std::vector<std::uint8_t>> pixels)
    : split_(split),
      channels_(channels),
      height_(height),
      width_(width),
      classes_(std::move(classes)),
      pixels_(std::move(pixels)) {
  std::set<int> ids;
  for (const auto& c : classes_) {
    if (!ids.insert(c.global_id).second) {
      throw std::invalid_argument("duplicate class id " + std::to_string(c.global_id) + " in " + to_string(split_));
    }
    if (!c.synth && !pixels_) {
      throw std::invalid_argument("class " + std::to_string(c.global_id) + " has neither generator nor pixel data");
    }
  }
}

void ClassPool::load_image(std::size_t class_index, std::size_t sample, std::span<double> dst) const {
  const auto& c = classes_.at(class_index);
  if (sample >= c.sample_count) {
    throw std::out_of_range("sample " + std::to_string(sample) + " of class " + std::to_string(c.global_id) +
                            " (has " + std::to_string(c.sample_count) + ")");
  }
  if (dst.size() != image_size()) throw ShapeError("load_image: destination has wrong size");
  if (c.synth) {
    render_synthetic(*c.synth, sample, channels_, height_, width_, dst);
    return;
  }
  const std::uint8_t* src = pixels_->data() + (c.raw_offset + sample) * image_size();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(src[i]) / 255.0;
}

const ClassPool& PoolSet::get(Split split) const {
  switch (split) {
    case Split::kMetaTrain:
      return train;
    case Split::kMetaVal:
      return val;
    case Split::kMetaTest:
      return test;
  }
  throw std::invalid_argument("bad split");
}

void render_synthetic(const SynthClassParams& p, std::size_t sample, int channels, int height, int width,
                      std::span<double> dst) {
  std::mt19937_64 rng(derive_seed(p.seed, sample, 0x1A6E));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double cx = 0.5 * width + p.jitter * (2.0 * unit(rng) - 1.0);
  const double cy = 0.5 * height + p.jitter * (2.0 * unit(rng) - 1.0);
  const double r = p.size * (0.85 + 0.3 * unit(rng));
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  std::array<double, 3> fg{}, bg{};
  for (int c = 0; c < 3; ++c) {
    fg[static_cast<std::size_t>(c)] = p.foreground[static_cast<std::size_t>(c)] + 0.12 * noise(rng);
    bg[static_cast<std::size_t>(c)] = p.background[static_cast<std::size_t>(c)] + 0.1 * noise(rng);
  }
  const double ca = std::cos(p.texture_angle), sa = std::sin(p.texture_angle);
  const double k = 2.0 * std::numbers::pi * p.texture_frequency / static_cast<double>(width);
  const auto plane = static_cast<std::size_t>(height * width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double m = shape_membership(p.shape, dx, dy, r);
      const double t = 0.5 + 0.5 * std::sin(k * (x * ca + y * sa) + phase);
      for (int c = 0; c < channels; ++c) {
        const auto ch = static_cast<std::size_t>(c % 3);
        double v = bg[ch] + m * (fg[ch] * (0.6 + 0.4 * t) - bg[ch]) + 0.15 * noise(rng);
        dst[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * width + x)] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

PoolSet synth_class_pool(std::uint64_t seed, const SynthOptions& opt) {
  if (opt.train_classes < 0 || opt.val_classes < 0 || opt.test_classes < 0 || opt.samples_per_class == 0) {
    throw std::invalid_argument("synthetic pool sizes must be non-negative with at least one sample per class");
  }
  PoolSet set;
  set.train = synth_split(Split::kMetaTrain, 0, opt.train_classes, seed, opt);
  set.val = synth_split(Split::kMetaVal, opt.train_classes, opt.val_classes, seed, opt);
  set.test = synth_split(Split::kMetaTest, opt.train_classes + opt.val_classes, opt.test_classes, seed, opt);
  return set;
}

PoolSet load_raw_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open dataset manifest " + manifest_path.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  if (m.value("format_version", -1) != kRawFormatVersion) {
    throw std::runtime_error("dataset manifest format_version " + m.value("format_version", json(-1)).dump() +
                             " unsupported (expected " + std::to_string(kRawFormatVersion) + ")");
  }
  if (m.value("dtype", std::string()) != "u8" || m.value("layout", std::string()) != "NCHW") {
    throw std::runtime_error("dataset manifest must declare dtype u8 and layout NCHW");
  }
  const auto count = m.at("count").get<std::size_t>();
  const int C = m.at("channels").get<int>();
  const int H = m.at("height").get<int>();
  const int W = m.at("width").get<int>();
  if (C < 1 || H < 1 || W < 1) throw std::runtime_error("dataset dims must be positive");
  const std::size_t per_image = static_cast<std::size_t>(C * H * W);
  const std::size_t expected = count * per_image;

  const auto blob_path = manifest_path.parent_path() / m.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open dataset blob " + blob_path.string());
  auto pixels = std::make_shared<std::vector<std::uint8_t>>(
      (std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  if (pixels->size() != expected) {
    throw std::runtime_error("dataset blob size mismatch: manifest implies " + std::to_string(expected) +
                             " bytes (" + std::to_string(count) + " images x " + std::to_string(per_image) +
                             "), blob has " + std::to_string(pixels->size()) + " bytes");
  }

  std::vector<ClassDescriptor> per_split[3];
  for (const auto& c : m.at("classes")) {
    ClassDescriptor d;
    d.global_id = c.at("id").get<int>();
    d.raw_offset = c.at("start").get<std::size_t>();
    d.sample_count = c.at("count").get<std::size_t>();
    if (d.sample_count == 0 || d.raw_offset + d.sample_count > count) {
      throw std::runtime_error("class " + std::to_string(d.global_id) + " range [" + std::to_string(d.raw_offset) +
                               ", " + std::to_string(d.raw_offset + d.sample_count) + ") outside " +
                               std::to_string(count) + " images");
    }
    const auto split = parse_split(c.at("split").get<std::string>());
    per_split[static_cast<int>(split)].push_back(d);
  }
  std::set<int> ids;
  for (const auto& s : per_split) {
    for (const auto& d : s) {
      if (!ids.insert(d.global_id).second) {
        throw std::runtime_error("class id " + std::to_string(d.global_id) + " appears in more than one entry");
      }
    }
  }
  PoolSet set;
  set.train = ClassPool(Split::kMetaTrain, C, H, W, per_split[0], pixels);
  set.val = ClassPool(Split::kMetaVal, C, H, W, per_split[1], pixels);
  set.test = ClassPool(Split::kMetaTest, C, H, W, per_split[2], pixels);
  return set;
}

std::size_t export_raw_dataset(const PoolSet& pools, const std::filesystem::path& manifest_path,
                               const std::string& blob_name) {
  const ClassPool* splits[3] = {&pools.train, &pools.val, &pools.test};
  int C = 0, H = 0, W = 0;
  for (const auto* p : splits) {
    if (p->class_count() == 0) continue;
    if (C == 0) {
      C = p->channels();
      H = p->height();
      W = p->width();
    } else if (p->channels() != C || p->height() != H || p->width() != W) {
      throw std::invalid_argument("export_raw_dataset: splits disagree on image dimensions");
    }
  }
  if (C == 0) throw std::invalid_argument("export_raw_dataset: no classes to export");
  const std::size_t per_image = static_cast<std::size_t>(C * H * W);

  std::vector<std::uint8_t> bytes;
  json classes = json::array();
  std::vector<double> img(per_image);
  std::size_t next = 0;
  for (const auto* p : splits) {
    for (std::size_t ci = 0; ci < p->class_count(); ++ci) {
      const auto& d = p->descriptor(ci);
      classes.push_back({{"id", d.global_id}, {"split", to_string(p->split())}, {"start", next},
                         {"count", d.sample_count}});
      for (std::size_t s = 0; s < d.sample_count; ++s) {
        p->load_image(ci, s, img);
        for (double v : img) bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
      next += d.sample_count;
    }
  }
  json m = {{"format_version", kRawFormatVersion},
            {"kind", "metadock-dataset"},
            {"blob", blob_name},
            {"dtype", "u8"},
            {"layout", "NCHW"},
            {"count", next},
            {"channels", C},
            {"height", H},
            {"width", W},
            {"classes", classes}};
  const auto dir = manifest_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream blob(dir / blob_name, std::ios::binary);
  blob.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!blob) throw std::runtime_error("failed writing dataset blob");
  std::ofstream out(manifest_path);
  out << m.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing dataset manifest");
  return bytes.size();
}

TaskEpisode episode_for_classes(const ClassPool& pool, const EpisodeSpec& spec, std::span<const std::size_t> classes,
                                std::uint64_t seed) {
  spec.validate();
  if (classes.size() != static_cast<std::size_t>(spec.n_way)) {
    throw std::invalid_argument("episode needs " + std::to_string(spec.n_way) + " classes, got " +
                                std::to_string(classes.size()));
  }
  if (pool.channels() != spec.channels || pool.height() != spec.image_size || pool.width() != spec.image_size) {
    throw ShapeError("pool images are " + std::to_string(pool.channels()) + "x" + std::to_string(pool.height()) + "x" +
                     std::to_string(pool.width()) + ", episode spec wants " + std::to_string(spec.channels) + "x" +
                     std::to_string(spec.image_size) + "x" + std::to_string(spec.image_size));
  }
  const auto K = static_cast<std::size_t>(spec.k_shot);
  const auto Q = static_cast<std::size_t>(spec.query_per_class);
  const auto N = classes.size();
  const std::size_t D = pool.image_size();
  const Shape support_shape{N * K, static_cast<std::size_t>(spec.channels), static_cast<std::size_t>(spec.image_size),
                            static_cast<std::size_t>(spec.image_size)};
  const Shape query_shape{N * Q, support_shape[1], support_shape[2], support_shape[3]};

  TaskEpisode ep;
  ep.support.images = Tensor(support_shape);
  ep.query.images = Tensor(query_shape);
  std::mt19937_64 rng(derive_seed(seed, 0x5A3B1E));
  for (std::size_t label = 0; label < N; ++label) {
    const auto& desc = pool.descriptor(classes[label]);
    if (desc.sample_count < K + Q) {
      throw std::invalid_argument("class " + std::to_string(desc.global_id) + " has " +
                                  std::to_string(desc.sample_count) + " samples, episode needs " +
                                  std::to_string(K + Q));
    }
    const auto picks = draw_without_replacement(desc.sample_count, K + Q, rng);
    ep.class_ids.push_back(desc.global_id);
    ep.support_samples.emplace_back(picks.begin(), picks.begin() + static_cast<std::ptrdiff_t>(K));
    ep.query_samples.emplace_back(picks.begin() + static_cast<std::ptrdiff_t>(K), picks.end());
    for (std::size_t j = 0; j < K; ++j) {
      pool.load_image(classes[label], picks[j], ep.support.images.data().subspan((label * K + j) * D, D));
      ep.support.labels.push_back(static_cast<int>(label));
    }
    for (std::size_t j = 0; j < Q; ++j) {
      pool.load_image(classes[label], picks[K + j], ep.query.images.data().subspan((label * Q + j) * D, D));
      ep.query.labels.push_back(static_cast<int>(label));
    }
  }
  return ep;
}

TaskEpisode sample_episode(const ClassPool& pool, const EpisodeSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (static_cast<std::size_t>(spec.n_way) > pool.class_count()) {
    throw std::invalid_argument("cannot draw " + std::to_string(spec.n_way) + " classes from a pool of " +
                                std::to_string(pool.class_count()));
  }
  std::mt19937_64 rng(derive_seed(seed, 0xC1A55E5));
  const auto classes = draw_without_replacement(pool.class_count(), static_cast<std::size_t>(spec.n_way), rng);
  return episode_for_classes(pool, spec, classes, seed);
}

std::vector<std::vector<std::size_t>> enumerate_test_tasks(const ClassPool& pool, const EpisodeSpec& spec) {
  const std::size_t C = pool.class_count();
  const auto N = static_cast<std::size_t>(spec.n_way);
  if (spec.n_way < 1 || N > C) {
    throw std::invalid_argument("cannot enumerate " + std::to_string(spec.n_way) + "-subsets of " + std::to_string(C) +
                                " classes");
  }
  std::vector<std::vector<std::size_t>> out;
  out.reserve(binomial(C, N));
  std::vector<std::size_t> comb(N);
  for (std::size_t i = 0; i < N; ++i) comb[i] = i;
  while (true) {
    out.push_back(comb);
    std::size_t i = N;
    while (i > 0 && comb[i - 1] == C - N + (i - 1)) --i;
    if (i == 0) break;
    ++comb[i - 1];
    for (std::size_t j = i; j < N; ++j) comb[j] = comb[j - 1] + 1;
  }
  return out;
}

std::vector<TaskRef> enumerated_task_refs(const ClassPool& pool, const EpisodeSpec& spec, std::uint64_t seed) {
  auto combos = enumerate_test_tasks(pool, spec);
  std::vector<TaskRef> refs;
  refs.reserve(combos.size());
  for (std::size_t i = 0; i < combos.size(); ++i) refs.push_back(TaskRef{std::move(combos[i]), derive_seed(seed, i)});
  return refs;
}

std::vector<TaskRef> sampled_task_refs(const ClassPool& pool, const EpisodeSpec& spec, std::size_t count,
                                       std::uint64_t seed) {
  spec.validate();
  if (static_cast<std::size_t>(spec.n_way) > pool.class_count()) {
    throw std::invalid_argument("cannot draw " + std::to_string(spec.n_way) + " classes from a pool of " +
                                std::to_string(pool.class_count()));
  }
  std::vector<TaskRef> refs;
  refs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto task_seed = derive_seed(seed, i, 0x7A5C);
    std::mt19937_64 rng(derive_seed(task_seed, 0xC1A55E5));
    refs.push_back(TaskRef{draw_without_replacement(pool.class_count(), static_cast<std::size_t>(spec.n_way), rng),
                           task_seed});
  }
  return refs;
}

TaskEpisode make_episode(const ClassPool& pool, const EpisodeSpec& spec, const TaskRef& ref) {
  return episode_for_classes(pool, spec, ref.classes, ref.seed);
}

}  // namespace metadock::tasks
