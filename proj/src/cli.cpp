#include "medslip/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "medslip/errors.hpp"
#include "medslip/train_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace medslip::cli {

// ---------------------------------------------------------------------------------------
// Hashing and manifests

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    char buf[1 << 16];
    while (in) {
      in.read(buf, sizeof buf);
      update(buf, static_cast<std::size_t>(in.gcount()));
    }
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    std::ostringstream o;
    for (unsigned i = 0; i < len; ++i) o << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return o.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::vector<fs::path> files_below(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

std::string content_hash(const fs::path& path) {
  Sha256 h;
  if (fs::is_directory(path)) {
    for (const auto& rel : files_below(path)) {
      h.update(rel.generic_string());
      h.update("\0", 1);
      h.update_file(path / rel);
    }
  } else {
    if (!fs::exists(path)) throw IoError("cannot hash missing path " + path.string());
    h.update_file(path);
  }
  return h.hex();
}

json RunManifest::to_json() const {
  auto pairs = [](const auto& v) {
    json a = json::array();
    for (const auto& [p, h] : v) a.push_back({{"path", p}, {"sha256", h}});
    return a;
  };
  return {{"command", command}, {"config", config},   {"seed", seed},       {"inputs", pairs(inputs)},
          {"outputs", pairs(outputs)}, {"extra", extra}, {"seconds", seconds}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.value("inputs", json::array())) m.inputs.emplace_back(e.at("path"), e.at("sha256"));
    for (const auto& e : j.value("outputs", json::array())) m.outputs.emplace_back(e.at("path"), e.at("sha256"));
    m.extra = j.value("extra", json::object());
    m.seconds = j.value("seconds", 0.0);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run manifest: ") + e.what());
  }
  return m;
}

void RunManifest::write(const fs::path& out_dir) const {
  const auto tmp = out_dir / "run_manifest.json.tmp";
  {
    std::ofstream o(tmp);
    o << to_json().dump(2) << '\n';
    if (!o) throw IoError("cannot write " + tmp.string());
  }
  fs::rename(tmp, out_dir / "run_manifest.json");
}

// ---------------------------------------------------------------------------------------
// Commands. Each takes its fully resolved config and the output directory.

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
  fs::path out_dir;
  RunManifest manifest;
  int status = 0;
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream o(p);
  o << j.dump(2) << '\n';
  if (!o) throw IoError("cannot write " + p.string());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream o(p);
  o << s;
  if (!o) throw IoError("cannot write " + p.string());
}

template <class T>
T get(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

fs::path required_path(const json& cfg, const char* key) {
  if (!cfg.contains(key) || cfg[key].is_null() || cfg[key].get<std::string>().empty())
    throw ConfigError(std::string("missing required setting '") + key + "'");
  return get<std::string>(cfg, key);
}

report::KnowledgeTable knowledge_of(const json& cfg) {
  if (!cfg.contains("knowledge") || cfg["knowledge"].is_null()) return report::KnowledgeTable::builtin();
  return report::KnowledgeTable::load(get<std::string>(cfg, "knowledge"));
}

void add_input(Context& ctx, const fs::path& p) { ctx.manifest.inputs.emplace_back(p.string(), content_hash(p)); }

void cmd_synth(const json& cfg, Context& ctx) {
  const auto sc = synth::SynthConfig::from_json(cfg.at("synth"));
  const auto count = get<std::size_t>(cfg, "count");
  if (count == 0) throw ConfigError("synth: count must be >= 1");
  const auto corpus = synth::generate_corpus(sc, count, ctx.out_dir);
  ctx.manifest.seed = sc.seed;
  ctx.out << "synth: wrote " << corpus.studies.size() << " studies to " << ctx.out_dir.string() << '\n';
}

void cmd_extract(const json& cfg, Context& ctx) {
  const auto path = required_path(cfg, "reports");
  std::ifstream in(path);
  if (!in) throw IoError("cannot read reports file " + path.string());
  add_input(ctx, path);
  report::GrammarConfig grammar;
  if (cfg.contains("grammar") && cfg["grammar"].is_object()) {
    grammar.pathologies = cfg["grammar"].value("pathologies", std::vector<std::string>{});
    grammar.anatomies = cfg["grammar"].value("anatomies", std::vector<std::string>{});
  }
  std::vector<report::TripletRecord> all;
  std::size_t skipped = 0, studies = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    // "<study_id>\t<report>", or a bare report whose id is its line number.
    const auto tab = line.find('\t');
    const std::string id = tab == std::string::npos ? "line" + std::to_string(line_no) : line.substr(0, tab);
    const std::string text = tab == std::string::npos ? line : line.substr(tab + 1);
    report::ParseResult r;
    try {
      r = report::parse_report(text, grammar, id);
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    all.insert(all.end(), r.triplets.begin(), r.triplets.end());
    skipped += r.skipped_sentences;
    ++studies;
  }
  report::write_triplets(ctx.out_dir / "triplets.jsonl", all);
  write_json(ctx.out_dir / "summary.json",
             {{"studies", studies}, {"triplets", all.size()}, {"skipped_sentences", skipped}});
  ctx.out << "extract-triplets: " << all.size() << " triplets from " << studies << " reports, " << skipped
          << " sentences skipped\n";
}

void cmd_pretrain(const json& cfg, Context& ctx) {
  const auto corpus_dir = required_path(cfg, "corpus");
  const auto corpus = synth::load_corpus(corpus_dir);
  add_input(ctx, corpus_dir);

  auto mc = stream::ModelConfig::from_json(cfg.at("model"));
  auto tc = train::TrainConfig::from_json(cfg.at("train"));
  mc.stream.enable_dual_stream = tc.flags.ds;
  mc.stream.enable_mask_generator = tc.flags.mg;
  if (mc.image_height != corpus.config.image_size || mc.image_width != corpus.config.image_size)
    throw CompatibilityError("pretrain: model expects " + std::to_string(mc.image_height) + "x" +
                             std::to_string(mc.image_width) + " images, corpus has " +
                             std::to_string(corpus.config.image_size));

  auto indices = corpus.split.train;
  const auto limit = cfg.value("max_train", std::size_t{0});
  if (limit > 0 && indices.size() > limit) indices.resize(limit);
  const auto& q = cfg.at("queries");
  const auto qs = report::select_queries(corpus.triplets_of(indices), q.value("anatomy", std::size_t{6}),
                                         q.value("pathology", std::size_t{5}), knowledge_of(cfg));
  auto model = stream::Model::create(mc);
  const auto provider = text::make_provider(mc.provider);
  train::PretrainInputs inputs{train::make_examples(corpus, indices, qs), qs, text::embed_queries(qs, *provider)};
  const auto res = train::pretrain(model, inputs, tc, ctx.out_dir);
  write_json(ctx.out_dir / "queries.json", qs.to_json());

  objectives::LossReport last{};
  std::size_t k = 0;
  for (const auto& s : res.trace)
    if (s.epoch == tc.epochs - 1) {
      last.protocl += s.report.protocl;
      last.icl += s.report.icl;
      last.exist += s.report.exist;
      last.total += s.report.total;
      ++k;
    }
  const double inv = k ? 1.0 / static_cast<double>(k) : 0.0;
  json summary = {{"flags", tc.flags.to_json()},
                  {"label", tc.flags.label()},
                  {"steps", res.trace.size()},
                  {"final_epoch_mean", {{"exist", last.exist * inv}, {"total", last.total * inv}}}};
  if (tc.flags.pcl) summary["final_epoch_mean"]["protocl"] = last.protocl * inv;
  if (tc.flags.icl) summary["final_epoch_mean"]["icl"] = last.icl * inv;
  write_json(ctx.out_dir / "summary.json", summary);
  ctx.manifest.seed = tc.seed;
  ctx.manifest.extra["flags"] = {{"BL", true}, {"PCL", tc.flags.pcl}, {"DS", tc.flags.ds}, {"MG", tc.flags.mg},
                                 {"ICL", tc.flags.icl}};
  ctx.out << "pretrain " << tc.flags.label() << ": " << res.trace.size() << " steps; final epoch mean";
  for (const auto& [key, v] : summary["final_epoch_mean"].items()) ctx.out << ' ' << key << '=' << v.get<double>();
  ctx.out << '\n';
}

struct Loaded {
  stream::Model model;
  report::QuerySet qs;
  text::QueryEmbeddings qe;
  synth::Corpus corpus;
};

Loaded load_for_eval(const json& cfg, Context& ctx) {
  const auto ckpt = required_path(cfg, "checkpoint");
  const auto corpus_dir = required_path(cfg, "corpus");
  auto cp = stream::load_checkpoint(ckpt);
  add_input(ctx, ckpt);
  auto corpus = synth::load_corpus(corpus_dir);
  add_input(ctx, corpus_dir);
  if (!cp.extra.contains("queries")) throw CompatibilityError("checkpoint has no query set: " + ckpt.string());
  auto qs = report::QuerySet::from_json(cp.extra["queries"], knowledge_of(cfg));
  auto pc = cp.config.provider;
  if (cfg.contains("provider") && cfg["provider"].is_object()) pc = text::ProviderConfig::from_json(cfg["provider"]);
  const auto provider = text::make_provider(pc);
  if (provider->dim() != cp.config.provider.d_t)
    throw CompatibilityError("text encoder width " + std::to_string(provider->dim()) +
                             " does not match checkpoint projection input " + std::to_string(cp.config.provider.d_t));
  auto model = stream::Model::from_params(cp.config, cp.params);
  auto qe = text::build_query_embeddings(qs, *provider, model.projection());
  return {std::move(model), std::move(qs), std::move(qe), std::move(corpus)};
}

const std::vector<std::size_t>& split_of(const synth::Corpus& c, const std::string& name) {
  if (name == "train") return c.split.train;
  if (name == "val") return c.split.val;
  if (name == "test") return c.split.test;
  throw ConfigError("unknown split '" + name + "' (train, val, test)");
}

void cmd_eval(const json& cfg, Context& ctx) {
  const auto task = get<std::string>(cfg, "task");
  if (task != "zeroshot-cls" && task != "grounding" && task != "latent")
    throw ConfigError("eval: unknown task '" + task + "' (zeroshot-cls, grounding, latent)");
  const auto L = load_for_eval(cfg, ctx);
  const auto split = cfg.value("split", std::string(task == "latent" ? "train" : "test"));
  const auto& idx = split_of(L.corpus, split);

  if (task == "zeroshot-cls") {
    const auto rep = train::evaluate_zero_shot(L.model, L.corpus, idx, L.qs, L.qe, cfg.value("threshold", 0.5));
    write_json(ctx.out_dir / "metrics.json", rep.to_json());
    write_text(ctx.out_dir / "metrics.csv", rep.to_csv());
    ctx.out << "zeroshot-cls macro AUC " << rep.macro_auc << " F1 " << rep.macro_f1 << " ACC " << rep.macro_acc << '\n';
  } else if (task == "grounding") {
    const auto g = train::evaluate_grounding(L.model, L.corpus, idx, L.qs, L.qe, cfg.value("threshold_quantile", 0.95));
    write_text(ctx.out_dir / "grounding.csv", g.to_csv());
    write_json(ctx.out_dir / "metrics.json",
               {{"pointing_game", g.pointing_game}, {"dice", g.dice}, {"iou", g.iou}, {"pairs", g.rows.size()}});
    ctx.out << "grounding pointing game " << g.pointing_game << " dice " << g.dice << " iou " << g.iou << " over "
            << g.rows.size() << " pairs\n";
  } else {
    const auto ex = train::make_examples(L.corpus, idx, L.qs);
    const double kl = train::measure_latent_alignment(L.qe, train::global_existence(ex));
    write_json(ctx.out_dir / "latent.json", {{"kl", kl}});
    ctx.out << "latent KL " << kl << '\n';
  }
}

void cmd_finetune(const json& cfg, Context& ctx) {
  const auto task = get<std::string>(cfg, "task");
  if (task != "classification" && task != "segmentation")
    throw ConfigError("finetune: unknown task '" + task + "' (classification, segmentation)");
  const auto fc = train::FinetuneConfig::from_json(cfg.at("finetune"));
  const auto L = load_for_eval(cfg, ctx);
  const auto& pool = L.corpus.split.train;
  const auto& test = split_of(L.corpus, cfg.value("split", std::string("test")));
  std::vector<std::string> ids;
  if (task == "classification") {
    const auto r = train::finetune_classifier(L.model, L.corpus, pool, test, L.qs, fc);
    write_json(ctx.out_dir / "metrics.json", r.report.to_json());
    write_text(ctx.out_dir / "metrics.csv", r.report.to_csv());
    ids = r.sampled_ids;
    ctx.out << "finetune classification fraction " << fc.fraction << " macro AUC " << r.report.macro_auc << '\n';
  } else {
    const auto r = train::finetune_segmenter(L.model, L.corpus, pool, test, fc);
    write_json(ctx.out_dir / "metrics.json", {{"dice", r.dice}, {"iou", r.iou}, {"evaluated", r.evaluated}});
    ids = r.sampled_ids;
    ctx.out << "finetune segmentation fraction " << fc.fraction << " dice " << r.dice << " iou " << r.iou << '\n';
  }
  ctx.manifest.seed = fc.seed;
  ctx.manifest.extra["sampled_ids"] = ids;
}

void cmd_gradcheck(const json& cfg, Context& ctx) {
  train::GradCheckOptions opt;
  opt.h = cfg.value("h", opt.h);
  opt.samples_per_group = cfg.value("samples_per_group", opt.samples_per_group);
  opt.seed = cfg.value("seed", opt.seed);
  opt.corrupt_group = cfg.value("corrupt_group", std::string{});
  const double tol = cfg.value("tolerance", 1e-4);
  const auto instances = cfg.value("instances", 15);
  auto selectors = cfg.value("selectors", train::grad_check_selectors());

  json report = json::array();
  std::size_t total = 0, failed = 0;
  for (const auto& sel : selectors) {
    double worst = 0;
    std::vector<std::string> bad_groups;
    for (int i = 0; i < instances; ++i) {
      const auto r = train::grad_check(sel, static_cast<std::uint64_t>(i), opt);
      worst = std::max(worst, r.max_rel_error);
      ++total;
      if (!r.passed(tol)) {
        ++failed;
        for (const auto& g : r.groups)
          if (g.rel_error >= tol && std::find(bad_groups.begin(), bad_groups.end(), g.group) == bad_groups.end())
            bad_groups.push_back(g.group);
      }
    }
    report.push_back({{"check", sel}, {"instances", instances}, {"max_rel_error", worst}, {"failing_groups", bad_groups}});
    ctx.out << (bad_groups.empty() ? "PASS " : "FAIL ") << sel << " max rel err " << worst << '\n';
    for (const auto& g : bad_groups) ctx.err << "gradcheck: " << sel << " failed in parameter group " << g << '\n';
  }
  write_json(ctx.out_dir / "gradcheck.json",
             {{"tolerance", tol}, {"instances", total}, {"failed", failed}, {"checks", report}});
  ctx.manifest.seed = opt.seed;
  if (failed > 0) ctx.status = 1;
}

// ---------------------------------------------------------------------------------------
// Config resolution

json defaults_for(const std::string& command) {
  if (command == "synth") return {{"synth", synth::SynthConfig::defaults().to_json()}, {"count", 2400}};
  if (command == "extract-triplets") return {{"reports", nullptr}, {"grammar", nullptr}};
  if (command == "pretrain")
    return {{"corpus", nullptr},
            {"model", stream::ModelConfig{}.to_json()},
            {"train", train::TrainConfig{}.to_json()},
            {"queries", {{"anatomy", 6}, {"pathology", 5}}},
            {"knowledge", nullptr},
            {"max_train", 0}};
  if (command == "eval") return {{"checkpoint", nullptr}, {"corpus", nullptr}, {"task", "zeroshot-cls"}, {"knowledge", nullptr}};
  if (command == "finetune")
    return {{"checkpoint", nullptr}, {"corpus", nullptr}, {"task", "classification"},
            {"finetune", train::FinetuneConfig{}.to_json()}, {"knowledge", nullptr}};
  if (command == "gradcheck") return {{"instances", 15}, {"seed", 0}};
  throw ConfigError("unknown command " + command);
}

json load_config_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("config file not found: " + p.string());
  try {
    auto j = json::parse(in);
    // A run manifest doubles as a config: its resolved config is reused as is.
    if (j.contains("command") && j.contains("config") && j.contains("outputs")) return j["config"];
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + p.string() + ": " + e.what());
  }
}

void set_seed(const std::string& command, json& cfg, std::uint64_t seed) {
  if (command == "synth") cfg["synth"]["seed"] = seed;
  else if (command == "pretrain") cfg["train"]["seed"] = cfg["model"]["seed"] = seed;
  else if (command == "finetune") cfg["finetune"]["seed"] = seed;
  else if (command == "gradcheck") cfg["seed"] = seed;
}

std::uint64_t parse_seed(const std::string& s, const char* origin) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string(origin) + ": seed must be a non-negative integer, got '" + s + "'");
  }
}

void dispatch(const std::string& command, const json& cfg, Context& ctx) {
  if (command == "synth") cmd_synth(cfg, ctx);
  else if (command == "extract-triplets") cmd_extract(cfg, ctx);
  else if (command == "pretrain") cmd_pretrain(cfg, ctx);
  else if (command == "eval") cmd_eval(cfg, ctx);
  else if (command == "finetune") cmd_finetune(cfg, ctx);
  else if (command == "gradcheck") cmd_gradcheck(cfg, ctx);
  else throw ConfigError("unknown command " + command);
}

int execute(const std::string& command, json cfg, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  if (out_dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  err << "resolved config: " << cfg.dump() << '\n';
  Context ctx{out, err, out_dir, {}, 0};
  ctx.manifest.command = command;
  ctx.manifest.config = cfg;
  dispatch(command, cfg, ctx);

  for (const auto& rel : files_below(out_dir)) {
    if (rel == "run_manifest.json") continue;
    ctx.manifest.outputs.emplace_back(rel.generic_string(), content_hash(out_dir / rel));
  }
  ctx.manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ctx.manifest.write(out_dir);
  return ctx.status;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-stream language-image pre-training on synthetic radiographs", "medslip"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "medslip 0.1.0");

  std::string config_path, out_dir;
  std::string seed_flag;
  json overrides = json::object();
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (or a run_manifest.json)");
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--seed", seed_flag, "Seed; overrides MEDSLIP_SEED and the config file");
  };
  // Typed override helpers: a flag only lands in the config when given.
  auto str_opt = [&](CLI::App* sub, const std::string& flag, std::vector<std::string> path, const std::string& help) {
    return sub->add_option_function<std::string>(flag, [&overrides, path](const std::string& v) {
      json::json_pointer p;
      for (const auto& k : path) p /= k;
      overrides[p] = v;
    }, help);
  };
  auto num_opt = [&](CLI::App* sub, const std::string& flag, std::vector<std::string> path, const std::string& help) {
    sub->add_option_function<double>(flag, [&overrides, path](double v) {
      json::json_pointer p;
      for (const auto& k : path) p /= k;
      overrides[p] = v;
    }, help);
  };
  auto int_opt = [&](CLI::App* sub, const std::string& flag, std::vector<std::string> path, const std::string& help) {
    sub->add_option_function<long long>(flag, [&overrides, path](long long v) {
      json::json_pointer p;
      for (const auto& k : path) p /= k;
      overrides[p] = v;
    }, help);
  };

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
  common(synth_cmd);
  int_opt(synth_cmd, "--count", {"count"}, "Number of studies");

  auto* extract = app.add_subcommand("extract-triplets", "Parse reports into triplets.jsonl");
  common(extract);
  str_opt(extract, "--reports", {"reports"}, "Reports file: one '<study_id>\\t<report>' per line");

  auto* pre = app.add_subcommand("pretrain", "Pre-train the dual-stream model");
  common(pre);
  str_opt(pre, "--corpus", {"corpus"}, "Corpus directory");
  int_opt(pre, "--epochs", {"train", "epochs"}, "Epochs");
  int_opt(pre, "--batch-size", {"train", "batch_size"}, "Batch size");
  num_opt(pre, "--lr", {"train", "lr"}, "Peak learning rate");
  int_opt(pre, "--max-train", {"max_train"}, "Use only the first N training studies");
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--no-pcl", "pcl"}, {"--no-ds", "ds"}, {"--no-mg", "mg"}, {"--no-icl", "icl"}})
    pre->add_flag_callback(flag, [&overrides, key = key] { overrides["train"]["flags"][key] = false; },
                           "Disable the " + key + " component");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(eval);
  str_opt(eval, "--checkpoint", {"checkpoint"}, "Checkpoint directory");
  str_opt(eval, "--corpus", {"corpus"}, "Corpus directory");
  str_opt(eval, "--task", {"task"}, "zeroshot-cls | grounding | latent");
  str_opt(eval, "--split", {"split"}, "train | val | test");

  auto* latent = app.add_subcommand("measure-latent", "Same as eval --task latent");
  common(latent);
  str_opt(latent, "--checkpoint", {"checkpoint"}, "Checkpoint directory");
  str_opt(latent, "--corpus", {"corpus"}, "Corpus directory");
  str_opt(latent, "--split", {"split"}, "train | val | test");

  auto* ft = app.add_subcommand("finetune", "Fine-tune the pre-trained backbone");
  common(ft);
  str_opt(ft, "--checkpoint", {"checkpoint"}, "Checkpoint directory");
  str_opt(ft, "--corpus", {"corpus"}, "Corpus directory");
  str_opt(ft, "--task", {"task"}, "classification | segmentation");
  num_opt(ft, "--fraction", {"finetune", "fraction"}, "Labelled fraction of the training split (0.01, 0.1, 1)");
  int_opt(ft, "--epochs", {"finetune", "epochs"}, "Epochs");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  common(gc);
  int_opt(gc, "--instances", {"instances"}, "Random instances per check");
  str_opt(gc, "--corrupt-group", {"corrupt_group"}, "Test fixture: corrupt gradients of matching groups")->group("");

  auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a run manifest");
  std::string manifest_path;
  replay->add_option("manifest", manifest_path, "run_manifest.json")->required();
  replay->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, eo;
    const int code = app.exit(e, o, eo);
    out << o.str();
    err << eo.str();
    return code == 0 ? 0 : 2;
  }

  try {
    if (replay->parsed()) {
      std::ifstream in(manifest_path);
      if (!in) throw ConfigError("run manifest not found: " + manifest_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError("run manifest " + manifest_path + ": " + e.what());
      }
      const auto m = RunManifest::from_json(j);
      return execute(m.command, m.config, out_dir, out, err);
    }

    CLI::App* sub = app.get_subcommands().front();
    std::string command = sub->get_name();
    if (command == "measure-latent") {
      command = "eval";
      overrides["task"] = "latent";
    }
    json cfg = defaults_for(command);
    if (!config_path.empty()) cfg.merge_patch(load_config_file(config_path));
    if (const char* env = std::getenv("MEDSLIP_SEED"); env && *env) set_seed(command, cfg, parse_seed(env, "MEDSLIP_SEED"));
    cfg.merge_patch(overrides);
    if (!seed_flag.empty()) set_seed(command, cfg, parse_seed(seed_flag, "--seed"));
    return execute(command, cfg, out_dir, out, err);
  } catch (const DivergenceError& e) {
    err << "error: training diverged in " << e.component() << ": " << e.what() << '\n';
    return e.exit_code();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const json::exception& e) {
    err << "error: config: " << e.what() << '\n';
    return 2;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, out, err);
}

}  // namespace medslip::cli
