#include "metadock/harness.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace metadock::harness {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json nan_to_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double null_to_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

// Assigns known keys of `obj`; any other key is a configuration error.
void visit_keys(const json& obj, const std::string& where,
                const std::function<bool(const std::string&, const json&)>& assign) {
  if (!obj.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    try {
      known = assign(key, value);
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for '" + where + "." + key + "': " + e.what());
    }
    if (!known) throw std::invalid_argument("config: unknown key '" + where + "." + key + "'");
  }
}

json hp_to_json(const meta::HyperParams& hp) {
  return {{"lambda1", hp.lambda1},
          {"lambda2", hp.lambda2},
          {"lambda3", hp.lambda3},
          {"lambda4", hp.lambda4},
          {"V0", hp.V0},
          {"beta", hp.beta},
          {"beta_mask", hp.beta_mask ? json(*hp.beta_mask) : json(nullptr)},
          {"eta_theta", hp.eta_theta},
          {"eta_z", hp.eta_z},
          {"n_inner", hp.n_inner},
          {"n_outer", hp.n_outer},
          {"meta_batch", hp.meta_batch},
          {"cg_iters", hp.cg_iters},
          {"cg_tol", hp.cg_tol},
          {"meta_grad_mode", meta::to_string(hp.meta_grad_mode)},
          {"mask_grad_mode", meta::to_string(hp.mask_grad_mode)},
          {"pruning_mode", meta::to_string(hp.pruning_mode)},
          {"temperature", hp.temperature},
          {"eval_cadence", hp.eval_cadence},
          {"freeze_meta_masks", hp.freeze_meta_masks},
          {"continuous_l1", hp.continuous_l1}};
}

void hp_from_json(const json& j, meta::HyperParams& hp) {
  visit_keys(j, "hyperparams", [&](const std::string& k, const json& v) {
    if (k == "lambda1") hp.lambda1 = v.get<double>();
    else if (k == "lambda2") hp.lambda2 = v.get<double>();
    else if (k == "lambda3") hp.lambda3 = v.get<double>();
    else if (k == "lambda4") hp.lambda4 = v.get<double>();
    else if (k == "V0") hp.V0 = v.get<double>();
    else if (k == "beta") hp.beta = v.get<double>();
    else if (k == "beta_mask") hp.beta_mask = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    else if (k == "eta_theta") hp.eta_theta = v.get<double>();
    else if (k == "eta_z") hp.eta_z = v.get<double>();
    else if (k == "n_inner") hp.n_inner = v.get<int>();
    else if (k == "n_outer") hp.n_outer = v.get<int>();
    else if (k == "meta_batch") hp.meta_batch = v.get<int>();
    else if (k == "cg_iters") hp.cg_iters = v.get<int>();
    else if (k == "cg_tol") hp.cg_tol = v.get<double>();
    else if (k == "meta_grad_mode") hp.meta_grad_mode = meta::parse_meta_grad_mode(v.get<std::string>());
    else if (k == "mask_grad_mode") hp.mask_grad_mode = meta::parse_mask_grad_mode(v.get<std::string>());
    else if (k == "pruning_mode") hp.pruning_mode = meta::parse_pruning_mode(v.get<std::string>());
    else if (k == "temperature") hp.temperature = v.get<double>();
    else if (k == "eval_cadence") hp.eval_cadence = v.get<int>();
    else if (k == "freeze_meta_masks") hp.freeze_meta_masks = v.get<bool>();
    else if (k == "continuous_l1") hp.continuous_l1 = v.get<double>();
    else return false;
    return true;
  });
}

json model_to_json(const nn::ModelConfig& m) {
  return {{"in_channels", m.in_channels}, {"width", m.width},
          {"n_way", m.n_way},             {"image_size", m.image_size},
          {"norm", nn::to_string(m.norm.kind)}, {"group_count", m.norm.group_count}};
}

nn::ModelConfig model_from_json(const json& j) {
  nn::ModelConfig m;
  m.in_channels = j.at("in_channels").get<int>();
  m.width = j.at("width").get<int>();
  m.n_way = j.at("n_way").get<int>();
  m.image_size = j.at("image_size").get<int>();
  m.norm.kind = nn::parse_norm_kind(j.at("norm").get<std::string>());
  m.norm.group_count = j.at("group_count").get<int>();
  return m;
}

void put_le64(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
}

double get_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

std::string csv_escape(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line, std::size_t line_no) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw std::runtime_error("csv line " + std::to_string(line_no) + ": unterminated quote");
  cells.push_back(std::move(cur));
  return cells;
}

bool is_masked(const meta::HyperParams& hp) { return meta::mask_use(hp.pruning_mode) != nn::MaskUse::kNone; }

double meta_budget_fraction(const meta::MetaState& state, const meta::HyperParams& hp) {
  return is_masked(hp) ? masking::budget(masking::binarize(state.z.values)) : 1.0;
}

}  // namespace

// ---------------------------------------------------------------- metrics

double ci95(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("ci95 of an empty list");
  if (values.size() == 1) return 0.0;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

double mo_metric(double acc_train, double acc_test) {
  if (!(acc_test > 0.0)) throw std::invalid_argument("mo_metric: acc_test must be > 0, got " + format_double(acc_test));
  return (acc_train - acc_test) / acc_test * 100.0;
}

AccuracySummary summarize(const TaskScorer& scorer, std::size_t n_tasks) {
  if (n_tasks == 0) throw std::invalid_argument("evaluate: empty task list");
  AccuracySummary s;
  s.n = n_tasks;
  double budget_sum = 0.0;
  for (std::size_t i = 0; i < n_tasks; ++i) {
    const auto score = scorer(i);
    s.per_task.push_back(score.accuracy);
    budget_sum += score.task_budget;
  }
  s.mean = std::accumulate(s.per_task.begin(), s.per_task.end(), 0.0) / static_cast<double>(n_tasks);
  s.ci95 = ci95(s.per_task);
  s.mean_task_budget = budget_sum / static_cast<double>(n_tasks);
  return s;
}

std::string EvalReport::to_json() const {
  json j = {{"version", kVersion},
            {"mean_acc", mean_acc},
            {"ci95", ci95},
            {"n_tasks", n_tasks},
            {"acc_train_seen", nan_to_null(acc_train_seen)},
            {"acc_test_unseen", acc_test_unseen},
            {"mo", nan_to_null(mo)},
            {"meta_budget", meta_budget},
            {"mean_task_budget", mean_task_budget},
            {"n_seen_tasks", n_seen_tasks}};
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  const auto j = json::parse(text);
  if (j.at("version").get<int>() != kVersion) {
    throw std::runtime_error("eval report version " + j.at("version").dump() + " unsupported");
  }
  EvalReport r;
  r.mean_acc = j.at("mean_acc").get<double>();
  r.ci95 = j.at("ci95").get<double>();
  r.n_tasks = j.at("n_tasks").get<int>();
  r.acc_train_seen = null_to_nan(j.at("acc_train_seen"));
  r.acc_test_unseen = j.at("acc_test_unseen").get<double>();
  r.mo = null_to_nan(j.at("mo"));
  r.meta_budget = j.at("meta_budget").get<double>();
  r.mean_task_budget = j.at("mean_task_budget").get<double>();
  r.n_seen_tasks = j.at("n_seen_tasks").get<int>();
  return r;
}

EvalReport evaluate(const TaskScorer& unseen, std::size_t n_unseen, const TaskScorer& seen, std::size_t n_seen,
                    double meta_budget_fraction) {
  const auto test = summarize(unseen, n_unseen);
  EvalReport r;
  r.mean_acc = test.mean;
  r.ci95 = test.ci95;
  r.n_tasks = static_cast<int>(test.n);
  r.acc_test_unseen = test.mean;
  r.meta_budget = meta_budget_fraction * 100.0;
  r.mean_task_budget = test.mean_task_budget * 100.0;
  r.n_seen_tasks = static_cast<int>(n_seen);
  if (n_seen > 0) {
    r.acc_train_seen = summarize(seen, n_seen).mean;
    r.mo = mo_metric(r.acc_train_seen, r.acc_test_unseen);
  } else {
    r.acc_train_seen = kNaN;
    r.mo = kNaN;
  }
  return r;
}

TaskScore score_episode(const meta::Learner& learner, const meta::MetaState& state, const tasks::TaskEpisode& episode,
                        const meta::HyperParams& hp) {
  const auto task = meta::adapt(learner, state, episode.support, hp);
  const auto use = meta::mask_use(hp.pruning_mode);
  const auto logits = learner.logits(task.phi, task.zeta.values, episode.query.images, use);
  TaskScore s;
  s.accuracy = nn::accuracy(logits, episode.query.labels) * 100.0;
  s.task_budget = use == nn::MaskUse::kNone ? 1.0 : masking::budget(masking::binarize(task.zeta.values));
  return s;
}

// ---------------------------------------------------------------- configuration

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kTrain:
      return "train";
    case ExperimentKind::kSweep:
      return "sweep";
    case ExperimentKind::kCompareContinuous:
      return "compare-continuous";
    case ExperimentKind::kCompareGlobal:
      return "compare-global";
    case ExperimentKind::kReport:
      return "report";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(const std::string& text) {
  for (auto k : {ExperimentKind::kTrain, ExperimentKind::kSweep, ExperimentKind::kCompareContinuous,
                 ExperimentKind::kCompareGlobal, ExperimentKind::kReport}) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown experiment kind '" + text + "'");
}

nn::ModelConfig RunConfig::model_config() const {
  return nn::ModelConfig{episode.channels, width, episode.n_way, episode.image_size, norm};
}

tasks::EpisodeSpec RunConfig::train_episode() const {
  auto spec = episode;
  spec.query_per_class = train_query_per_class;
  return spec;
}

void RunConfig::validate() const {
  hp.validate();
  episode.validate();
  train_episode().validate();
  if (width < 1) throw std::invalid_argument("config: width must be >= 1");
  if (norm.group_count < 1) throw std::invalid_argument("config: group_count must be >= 1");
  if (pretrain_steps < 0 || continuous_phase1_steps < 0) throw std::invalid_argument("config: step counts must be >= 0");
  if (val_tasks < 0 || seen_tasks < 0) throw std::invalid_argument("config: task counts must be >= 0");
  if (test_tasks != "all-test") {
    std::size_t n = 0;
    const auto* end = test_tasks.data() + test_tasks.size();
    const auto res = std::from_chars(test_tasks.data(), end, n);
    if (res.ec != std::errc() || res.ptr != end || n == 0) {
      throw std::invalid_argument("config: test_tasks must be 'all-test' or a positive count, got '" + test_tasks +
                                  "'");
    }
  }
  if (dataset.source != "synthetic" && dataset.source != "raw") {
    throw std::invalid_argument("config: dataset.source must be 'synthetic' or 'raw'");
  }
  if (dataset.source == "raw" && dataset.manifest.empty()) {
    throw std::invalid_argument("config: dataset.manifest is required for raw datasets");
  }
}

std::string RunConfig::to_json() const {
  json j = {{"version", kVersion},
            {"kind", to_string(kind)},
            {"seed", seed},
            {"hyperparams", hp_to_json(hp)},
            {"episode",
             {{"n_way", episode.n_way},
              {"k_shot", episode.k_shot},
              {"query_per_class", episode.query_per_class},
              {"image_size", episode.image_size},
              {"channels", episode.channels}}},
            {"train_query_per_class", train_query_per_class},
            {"model", {{"width", width}, {"norm", nn::to_string(norm.kind)}, {"group_count", norm.group_count}}},
            {"dataset",
             {{"source", dataset.source},
              {"seed", dataset.seed},
              {"train_classes", dataset.synth.train_classes},
              {"val_classes", dataset.synth.val_classes},
              {"test_classes", dataset.synth.test_classes},
              {"samples_per_class", dataset.synth.samples_per_class},
              {"manifest", dataset.manifest}}},
            {"pretrain_steps", pretrain_steps},
            {"continuous_phase1_steps", continuous_phase1_steps},
            {"val_tasks", val_tasks},
            {"test_tasks", test_tasks},
            {"seen_tasks", seen_tasks},
            {"output_dir", output_dir},
            {"init_checkpoint", init_checkpoint}};
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  if (root.is_object() && root.contains("version") && root["version"] != json(kVersion)) {
    throw std::invalid_argument("config version " + root["version"].dump() + " unsupported (expected " +
                                std::to_string(kVersion) + ")");
  }
  visit_keys(root, "config", [&](const std::string& k, const json& v) {
    if (k == "version") return true;
    if (k == "kind") c.kind = parse_experiment_kind(v.get<std::string>());
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "hyperparams") hp_from_json(v, c.hp);
    else if (k == "episode") {
      visit_keys(v, "episode", [&](const std::string& ek, const json& ev) {
        if (ek == "n_way") c.episode.n_way = ev.get<int>();
        else if (ek == "k_shot") c.episode.k_shot = ev.get<int>();
        else if (ek == "query_per_class") c.episode.query_per_class = ev.get<int>();
        else if (ek == "image_size") c.episode.image_size = ev.get<int>();
        else if (ek == "channels") c.episode.channels = ev.get<int>();
        else return false;
        return true;
      });
    } else if (k == "train_query_per_class") c.train_query_per_class = v.get<int>();
    else if (k == "model") {
      visit_keys(v, "model", [&](const std::string& mk, const json& mv) {
        if (mk == "width") c.width = mv.get<int>();
        else if (mk == "norm") c.norm.kind = nn::parse_norm_kind(mv.get<std::string>());
        else if (mk == "group_count") c.norm.group_count = mv.get<int>();
        else return false;
        return true;
      });
    } else if (k == "dataset") {
      visit_keys(v, "dataset", [&](const std::string& dk, const json& dv) {
        if (dk == "source") c.dataset.source = dv.get<std::string>();
        else if (dk == "seed") c.dataset.seed = dv.get<std::uint64_t>();
        else if (dk == "train_classes") c.dataset.synth.train_classes = dv.get<int>();
        else if (dk == "val_classes") c.dataset.synth.val_classes = dv.get<int>();
        else if (dk == "test_classes") c.dataset.synth.test_classes = dv.get<int>();
        else if (dk == "samples_per_class") c.dataset.synth.samples_per_class = dv.get<std::size_t>();
        else if (dk == "manifest") c.dataset.manifest = dv.get<std::string>();
        else return false;
        return true;
      });
    } else if (k == "pretrain_steps") c.pretrain_steps = v.get<int>();
    else if (k == "continuous_phase1_steps") c.continuous_phase1_steps = v.get<int>();
    else if (k == "val_tasks") c.val_tasks = v.get<int>();
    else if (k == "test_tasks") c.test_tasks = v.is_number() ? std::to_string(v.get<long long>()) : v.get<std::string>();
    else if (k == "seen_tasks") c.seen_tasks = v.get<int>();
    else if (k == "output_dir") c.output_dir = v.get<std::string>();
    else if (k == "init_checkpoint") c.init_checkpoint = v.get<std::string>();
    else return false;
    return true;
  });
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return RunConfig::from_json(ss.str());
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const nn::FourConvModel model(ckpt.model);
  if (ckpt.state.theta.size() != model.param_count() || ckpt.state.z.size() != model.mask_count()) {
    throw ShapeError("save_checkpoint: state does not match the model layout");
  }
  const auto blob_name = path.filename().string() + ".bin";
  json params = json::array();
  for (const auto& p : model.params()) params.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", p.offset}});
  json masks = json::array();
  for (const auto& b : model.mask_layout().blocks()) masks.push_back({b.out_channels, b.in_channels});
  const std::size_t values = ckpt.state.theta.size() + ckpt.state.z.size();
  json m = {{"version", 1},
            {"kind", "metadock-checkpoint"},
            {"blob", blob_name},
            {"dtype", "f64"},
            {"byte_order", "little"},
            {"theta_count", ckpt.state.theta.size()},
            {"mask_count", ckpt.state.z.size()},
            {"blob_bytes", values * 8},
            {"step_count", ckpt.state.step_count},
            {"seed", ckpt.seed},
            {"model", model_to_json(ckpt.model)},
            {"param_layout", params},
            {"mask_layout", masks},
            {"hyperparams", hp_to_json(ckpt.hp)}};
  std::vector<unsigned char> bytes;
  bytes.reserve(values * 8);
  for (double v : ckpt.state.theta) put_le64(bytes, v);
  for (double v : ckpt.state.z.values) put_le64(bytes, v);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream blob(path.parent_path() / blob_name, std::ios::binary);
  blob.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!blob) throw std::runtime_error("failed writing checkpoint blob");
  write_text_file(path, m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  json m;
  try {
    m = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (m.value("kind", std::string()) != "metadock-checkpoint") {
    throw std::runtime_error(path.string() + " is not a metadock checkpoint manifest");
  }
  if (m.value("version", json(-1)) != json(1)) {
    throw std::runtime_error("checkpoint version " + m.value("version", json(nullptr)).dump() +
                             " unsupported (expected 1)");
  }
  Checkpoint ck;
  ck.model = model_from_json(m.at("model"));
  hp_from_json(m.at("hyperparams"), ck.hp);
  ck.seed = m.at("seed").get<std::uint64_t>();
  const nn::FourConvModel model(ck.model);
  const auto theta_n = m.at("theta_count").get<std::size_t>();
  const auto mask_n = m.at("mask_count").get<std::size_t>();
  if (theta_n != model.param_count() || mask_n != model.mask_count()) {
    throw std::runtime_error("checkpoint counts " + std::to_string(theta_n) + "/" + std::to_string(mask_n) +
                             " do not match the model layout " + std::to_string(model.param_count()) + "/" +
                             std::to_string(model.mask_count()));
  }
  std::ifstream blob(path.parent_path() / m.at("blob").get<std::string>(), std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open checkpoint blob " + m.at("blob").get<std::string>());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  const std::size_t expected = (theta_n + mask_n) * 8;
  if (bytes.size() != expected) {
    throw std::runtime_error("checkpoint blob length mismatch: expected " + std::to_string(expected) +
                             " bytes, found " + std::to_string(bytes.size()) + " bytes");
  }
  ck.state.theta.resize(theta_n);
  std::vector<double> z(mask_n);
  for (std::size_t i = 0; i < theta_n; ++i) ck.state.theta[i] = get_le64(bytes.data() + 8 * i);
  for (std::size_t i = 0; i < mask_n; ++i) z[i] = get_le64(bytes.data() + 8 * (theta_n + i));
  ck.state.z = masking::MaskSet(model.mask_layout(), std::move(z));
  ck.state.step_count = m.at("step_count").get<int>();
  return ck;
}

// ---------------------------------------------------------------- CSV

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw std::invalid_argument("not a number: '" + text + "'");
  return v;
}

std::string write_csv(const CsvTable& table) {
  std::string out = "# metadock-csv version=1\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(cells[i]);
    }
    out += '\n';
  };
  line(table.header);
  for (const auto& r : table.rows) {
    if (r.size() != table.header.size()) throw std::invalid_argument("csv row width differs from header");
    line(r);
  }
  return out;
}

CsvTable read_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line_no == 1 && line != "# metadock-csv version=1") {
        throw std::runtime_error("unsupported csv version line '" + line + "'");
      }
      continue;
    }
    auto cells = csv_split(line, line_no);
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size()) {
        throw std::runtime_error("csv line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                                 " cells, header has " + std::to_string(t.header.size()));
      }
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- baselines and reports

std::vector<double> keep_top_fraction(std::span<const double> scores, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("target budget must be in (0, 1], got " + format_double(fraction));
  }
  // The small slack keeps products such as 0.3 * 10 = 3.0000000000000004 from rounding up.
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(scores.size()) - 1e-9));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> out(scores.size(), -1.0);
  for (std::size_t r = 0; r < keep && r < order.size(); ++r) out[order[r]] = 1.0;
  return out;
}

ContinuousBaselineResult continuous_prune_baseline(const meta::ConvLearner& learner, const meta::MetaState& pretrained,
                                                   const meta::TaskSource& source, const meta::HyperParams& hp,
                                                   double target_budget, int phase1_steps, int phase3_steps) {
  if (!(target_budget > 0.0 && target_budget <= 1.0)) {
    throw std::invalid_argument("continuous baseline target budget must be in (0, 1], got " +
                                format_double(target_budget));
  }
  if (phase1_steps < 0 || phase3_steps < 0) throw std::invalid_argument("continuous baseline: negative step count");
  const auto& model = learner.model();
  ContinuousBaselineResult out;

  meta::MetaState state = pretrained;
  std::fill(state.z.values.begin(), state.z.values.end(), 1.0);
  meta::HyperParams hp1 = hp;
  hp1.pruning_mode = meta::PruningMode::kContinuousBaseline;
  hp1.freeze_meta_masks = false;
  hp1.n_outer = phase1_steps;
  auto phase1 = meta::train(learner, state, source, hp1);
  state = phase1.final_state;
  out.phase1_log = std::move(phase1.log);
  out.phase1_masks = state.z.values;

  const auto binary = keep_top_fraction(state.z.values, target_budget);
  for (std::size_t b = 0; b < model.mask_layout().layers(); ++b) {
    const auto& block = model.mask_layout().block(b);
    const auto& kp = model.param("conv" + std::to_string(b) + ".kernels");
    const std::size_t slice = kp.shape[2] * kp.shape[3];
    for (std::size_t s = 0; s < block.count(); ++s) {
      const double gate = state.z.values[block.offset + s];
      double* k = state.theta.data() + kp.offset + s * slice;
      for (std::size_t t = 0; t < slice; ++t) k[t] *= gate;
    }
  }
  state.z.values = binary;
  out.kept = static_cast<std::size_t>(std::count(binary.begin(), binary.end(), 1.0));

  out.compressed_hp = hp;
  out.compressed_hp.pruning_mode = meta::PruningMode::kGlobal;
  out.compressed_hp.freeze_meta_masks = true;
  if (phase3_steps > 0) {
    auto hp3 = out.compressed_hp;
    hp3.n_outer = phase3_steps;
    auto shifted = [&](int step, int index) { return source(step + phase1_steps, index); };
    auto phase3 = meta::train(learner, state, shifted, hp3);
    state = phase3.final_state;
    out.phase3_log = std::move(phase3.log);
  }
  out.compressed = std::move(state);
  return out;
}

std::vector<UsageMatrix> kernel_usage(const nn::FourConvModel& model, std::span<const double> params,
                                      std::span<const double> masks) {
  if (params.size() != model.param_count()) throw ShapeError("kernel_usage: parameter count mismatch");
  if (!masks.empty() && masks.size() != model.mask_count()) throw ShapeError("kernel_usage: mask count mismatch");
  std::vector<UsageMatrix> out;
  for (std::size_t b = 0; b < model.mask_layout().layers(); ++b) {
    const auto& block = model.mask_layout().block(b);
    const auto& kp = model.param("conv" + std::to_string(b) + ".kernels");
    const std::size_t slice = kp.shape[2] * kp.shape[3];
    UsageMatrix m{b, block.out_channels, block.in_channels, std::vector<double>(block.count(), 0.0)};
    for (std::size_t o = 0; o < m.rows; ++o) {
      double row_sum = 0.0;
      for (std::size_t i = 0; i < m.cols; ++i) {
        const std::size_t s = o * m.cols + i;
        const double gate = masks.empty() ? 1.0 : masking::binarize(masks[block.offset + s]);
        double mass = 0.0;
        for (std::size_t t = 0; t < slice; ++t) mass += std::abs(params[kp.offset + s * slice + t]);
        m.values[s] = gate * mass;
        row_sum += m.values[s];
      }
      if (row_sum > 0.0) {
        for (std::size_t i = 0; i < m.cols; ++i) m.values[o * m.cols + i] /= row_sum;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<UsageMatrix> kernel_usage_report(const nn::FourConvModel& model, const meta::MetaState& meta_state,
                                             const std::vector<meta::TaskState>& task_states) {
  if (task_states.empty()) return kernel_usage(model, meta_state.theta, meta_state.z.values);
  std::vector<UsageMatrix> mean;
  for (const auto& t : task_states) {
    const auto u = kernel_usage(model, t.phi, t.zeta.values);
    if (mean.empty()) {
      mean = u;
    } else {
      for (std::size_t l = 0; l < u.size(); ++l) linalg::axpy(1.0, u[l].values, mean[l].values);
    }
  }
  const double n = static_cast<double>(task_states.size());
  for (auto& m : mean) {
    for (auto& v : m.values) v /= n;
  }
  return mean;
}

CsvTable usage_csv(const UsageMatrix& matrix) {
  CsvTable t;
  t.header.push_back("out/in");
  for (std::size_t i = 0; i < matrix.cols; ++i) t.header.push_back("in" + std::to_string(i));
  for (std::size_t o = 0; o < matrix.rows; ++o) {
    std::vector<std::string> row{"out" + std::to_string(o)};
    for (std::size_t i = 0; i < matrix.cols; ++i) row.push_back(format_double(matrix.values[o * matrix.cols + i]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

CorrelationMatrix task_pair_correlation(const std::vector<meta::TaskState>& task_states, std::size_t layer,
                                        std::size_t n_pairs, std::uint64_t seed) {
  if (task_states.size() < 2) throw std::invalid_argument("task_pair_correlation needs at least 2 task states");
  const auto& layout = task_states.front().zeta.layout;
  for (const auto& t : task_states) {
    if (t.zeta.layout != layout) throw ShapeError("task_pair_correlation: task states use different mask layouts");
  }
  const auto& block = layout.block(layer);
  CorrelationMatrix out;
  out.channels = block.out_channels;
  std::mt19937_64 rng(seed);
  const std::size_t n = task_states.size();
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const std::size_t a = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    std::size_t b = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
    if (b >= a) ++b;
    out.pairs.emplace_back(a, b);
    const auto za = task_states[a].zeta.layer(layer);
    const auto zb = task_states[b].zeta.layer(layer);
    for (std::size_t o = 0; o < block.out_channels; ++o) {
      int same = 1;
      for (std::size_t i = 0; i < block.in_channels; ++i) {
        const std::size_t s = o * block.in_channels + i;
        if (masking::binarize(za[s]) != masking::binarize(zb[s])) {
          same = 0;
          break;
        }
      }
      out.values.push_back(same);
    }
  }
  return out;
}

CsvTable correlation_csv(const CorrelationMatrix& matrix) {
  CsvTable t;
  t.header = {"task_a", "task_b"};
  for (std::size_t c = 0; c < matrix.channels; ++c) t.header.push_back("ch" + std::to_string(c));
  for (std::size_t p = 0; p < matrix.pairs.size(); ++p) {
    std::vector<std::string> row{std::to_string(matrix.pairs[p].first), std::to_string(matrix.pairs[p].second)};
    for (std::size_t c = 0; c < matrix.channels; ++c) {
      row.push_back(std::to_string(matrix.values[p * matrix.channels + c]));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------- experiments

CsvTable sweep_csv(const std::vector<SweepRow>& rows) {
  CsvTable t;
  t.header = {"target_budget", "meta_budget", "task_budget", "val_acc",   "val_ci95",     "test_acc",
              "test_ci95",     "train_seen_acc", "mo",      "flops_fraction"};
  for (const auto& r : rows) {
    t.rows.push_back({r.target ? format_double(*r.target) : "unpruned", format_double(r.meta_budget),
                      format_double(r.task_budget), format_double(r.val_acc), format_double(r.val_ci95),
                      format_double(r.test_acc), format_double(r.test_ci95), format_double(r.train_seen_acc),
                      format_double(r.mo), format_double(r.flops_fraction)});
  }
  return t;
}

std::vector<SweepRow> parse_sweep_csv(const CsvTable& table) {
  if (table.header != sweep_csv({}).header) throw std::runtime_error("not a sweep table");
  std::vector<SweepRow> rows;
  for (const auto& c : table.rows) {
    SweepRow r;
    if (c[0] != "unpruned") r.target = parse_double(c[0]);
    r.meta_budget = parse_double(c[1]);
    r.task_budget = parse_double(c[2]);
    r.val_acc = parse_double(c[3]);
    r.val_ci95 = parse_double(c[4]);
    r.test_acc = parse_double(c[5]);
    r.test_ci95 = parse_double(c[6]);
    r.train_seen_acc = parse_double(c[7]);
    r.mo = parse_double(c[8]);
    r.flops_fraction = parse_double(c[9]);
    rows.push_back(r);
  }
  return rows;
}

CsvTable methods_csv(const std::vector<MethodResult>& results) {
  CsvTable t;
  t.header = {"method", "meta_budget", "task_budget", "val_acc", "val_ci95", "test_acc", "test_ci95",
              "train_seen_acc", "mo"};
  for (const auto& r : results) {
    t.rows.push_back({r.method, format_double(r.report.meta_budget), format_double(r.report.mean_task_budget),
                      format_double(r.val_acc), format_double(r.val_ci95), format_double(r.report.mean_acc),
                      format_double(r.report.ci95), format_double(r.report.acc_train_seen),
                      format_double(r.report.mo)});
  }
  return t;
}

Experiment::Experiment(RunConfig config) : config_(std::move(config)), learner_(config_.model_config()) {
  config_.validate();
  if (config_.dataset.source == "raw") {
    pools_ = tasks::load_raw_dataset(config_.dataset.manifest);
  } else {
    auto opts = config_.dataset.synth;
    opts.image_size = config_.episode.image_size;
    opts.channels = config_.episode.channels;
    pools_ = tasks::synth_class_pool(config_.dataset.seed, opts);
  }
  const auto& spec = config_.episode;
  const auto enough = [&](const tasks::ClassPool& p) { return p.class_count() >= static_cast<std::size_t>(spec.n_way); };
  if (config_.val_tasks > 0 && enough(pools_.val)) {
    val_refs_ = tasks::sampled_task_refs(pools_.val, spec, static_cast<std::size_t>(config_.val_tasks),
                                         tasks::derive_seed(config_.seed, 0x7A1));
  }
  if (config_.test_tasks == "all-test") {
    test_refs_ = tasks::enumerated_task_refs(pools_.test, spec, tasks::derive_seed(config_.seed, 0x7E5));
  } else {
    test_refs_ = tasks::sampled_task_refs(pools_.test, spec, std::stoul(config_.test_tasks),
                                          tasks::derive_seed(config_.seed, 0x7E5));
  }
  if (config_.seen_tasks > 0) {
    seen_refs_ = tasks::sampled_task_refs(pools_.train, spec, static_cast<std::size_t>(config_.seen_tasks),
                                          tasks::derive_seed(config_.seed, 0x5EE));
  }
}

meta::MetaState Experiment::initial_state() const {
  if (!config_.init_checkpoint.empty()) {
    auto ck = load_checkpoint(config_.init_checkpoint);
    if (ck.model != config_.model_config()) {
      throw std::invalid_argument("checkpoint " + config_.init_checkpoint + " was saved for a different model");
    }
    return ck.state;
  }
  return meta::initial_state(learner_, learner_.model().init_params(tasks::derive_seed(config_.seed, 1)),
                             tasks::derive_seed(config_.seed, 2));
}

const meta::MetaState& Experiment::pretrained() {
  if (!pretrained_) {
    auto state = initial_state();
    if (config_.pretrain_steps > 0) {
      auto hp = config_.hp;
      hp.pruning_mode = meta::PruningMode::kUnpruned;
      hp.n_outer = config_.pretrain_steps;
      state = train(state, hp, 1).final_state;
    }
    pretrained_ = std::move(state);
  }
  return *pretrained_;
}

meta::TaskSource Experiment::task_source(std::uint64_t stream) const {
  const auto spec = config_.train_episode();
  const auto base = tasks::derive_seed(config_.seed, stream, 0x7EA);
  const auto* pool = &pools_.train;
  return [spec, base, pool](int step, int index) {
    return tasks::sample_episode(*pool, spec, tasks::derive_seed(base, static_cast<std::uint64_t>(step),
                                                                 static_cast<std::uint64_t>(index)));
  };
}

meta::TrainResult Experiment::train(const meta::MetaState& start, const meta::HyperParams& hp,
                                    std::uint64_t stream) const {
  meta::EvalHook hook;
  if (!val_refs_.empty() && stream != 1) {
    hook = [this, hp](const meta::MetaState& s, int) {
      return evaluate_split(s, hp, tasks::Split::kMetaVal, val_refs_).mean;
    };
  }
  return meta::train(learner_, start, task_source(stream), hp, hook);
}

AccuracySummary Experiment::evaluate_split(const meta::MetaState& state, const meta::HyperParams& hp,
                                           tasks::Split split, const std::vector<tasks::TaskRef>& refs) const {
  const auto& pool = pools_.get(split);
  return summarize(
      [&](std::size_t i) {
        return score_episode(learner_, state, tasks::make_episode(pool, config_.episode, refs[i]), hp);
      },
      refs.size());
}

EvalReport Experiment::evaluate(const meta::MetaState& state, const meta::HyperParams& hp) const {
  auto scorer = [&](const tasks::ClassPool& pool, const std::vector<tasks::TaskRef>& refs) {
    return [this, &state, &hp, p = &pool, r = &refs](std::size_t i) {
      return score_episode(learner_, state, tasks::make_episode(*p, config_.episode, (*r)[i]), hp);
    };
  };
  return harness::evaluate(scorer(pools_.test, test_refs_), test_refs_.size(), scorer(pools_.train, seen_refs_),
                           seen_refs_.size(), meta_budget_fraction(state, hp));
}

std::vector<meta::TaskState> Experiment::adapted_tasks(const meta::MetaState& state, const meta::HyperParams& hp,
                                                       std::size_t count) const {
  std::vector<meta::TaskState> out;
  for (std::size_t i = 0; i < std::min(count, test_refs_.size()); ++i) {
    const auto ep = tasks::make_episode(pools_.test, config_.episode, test_refs_[i]);
    out.push_back(meta::adapt(learner_, state, ep.support, hp));
  }
  return out;
}

MethodResult Experiment::run_method(const std::string& name, const meta::HyperParams& hp) {
  MethodResult r;
  r.method = name;
  r.hp = hp;
  auto trained = train(pretrained(), hp, 2);
  r.state = std::move(trained.best);
  r.log = std::move(trained.log);
  if (!val_refs_.empty()) {
    const auto val = evaluate_split(r.state, hp, tasks::Split::kMetaVal, val_refs_);
    r.val_acc = val.mean;
    r.val_ci95 = val.ci95;
  }
  r.report = evaluate(r.state, hp);
  return r;
}

SweepRow Experiment::sweep_row(const MethodResult& result) const {
  SweepRow row;
  if (is_masked(result.hp)) row.target = result.hp.V0;
  row.meta_budget = result.report.meta_budget;
  row.task_budget = result.report.mean_task_budget;
  row.val_acc = result.val_acc;
  row.val_ci95 = result.val_ci95;
  row.test_acc = result.report.mean_acc;
  row.test_ci95 = result.report.ci95;
  row.train_seen_acc = result.report.acc_train_seen;
  row.mo = result.report.mo;
  if (is_masked(result.hp)) {
    const auto& model = learner_.model();
    row.flops_fraction = model.conv_macs(masking::binarize(result.state.z.values)) / model.conv_macs({});
  }
  return row;
}

std::vector<SweepRow> Experiment::budget_sweep(const std::vector<double>& budgets) {
  std::vector<SweepRow> rows;
  auto hp = config_.hp;
  hp.pruning_mode = meta::PruningMode::kUnpruned;
  rows.push_back(sweep_row(run_method("unpruned", hp)));
  for (double b : budgets) {
    hp = config_.hp;
    hp.pruning_mode = meta::PruningMode::kTaskSpecific;
    hp.V0 = b;
    hp.validate();
    rows.push_back(sweep_row(run_method("metadock-" + format_double(b), hp)));
  }
  return rows;
}

std::vector<MethodResult> Experiment::compare_continuous() {
  std::vector<MethodResult> out;
  auto hp = config_.hp;
  hp.pruning_mode = meta::PruningMode::kTaskSpecific;
  out.push_back(run_method("metadock-task-specific", hp));

  const int total = config_.hp.n_outer;
  const int phase1 = config_.continuous_phase1_steps > 0 ? std::min(config_.continuous_phase1_steps, total) : total / 2;
  auto cb = continuous_prune_baseline(learner_, pretrained(), task_source(2), config_.hp, config_.hp.V0, phase1,
                                      total - phase1);
  MethodResult r;
  r.method = "continuous-baseline";
  r.hp = cb.compressed_hp;
  r.state = std::move(cb.compressed);
  r.log = std::move(cb.phase3_log);
  if (!val_refs_.empty()) {
    const auto val = evaluate_split(r.state, r.hp, tasks::Split::kMetaVal, val_refs_);
    r.val_acc = val.mean;
    r.val_ci95 = val.ci95;
  }
  r.report = evaluate(r.state, r.hp);
  out.push_back(std::move(r));
  return out;
}

std::vector<MethodResult> Experiment::compare_global() {
  std::vector<MethodResult> out;
  auto hp = config_.hp;
  hp.pruning_mode = meta::PruningMode::kTaskSpecific;
  out.push_back(run_method("task-specific", hp));
  hp.pruning_mode = meta::PruningMode::kGlobal;
  out.push_back(run_method("global", hp));
  return out;
}

}  // namespace metadock::harness
