#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "disaad/advtrain.hpp"
#include "disaad/distillset.hpp"
#include "disaad/evalmetrics.hpp"
#include "disaad/evidence.hpp"
#include "disaad/records.hpp"
#include "disaad/theorysim.hpp"
#include "disaad/tinylm.hpp"
#include "disaad/world.hpp"

// Pipeline commands behind the CLI. Every command reads its inputs from the
// work directory, writes its outputs there and records them in manifest.json.
// All randomness comes from the master seed through named sub-streams.
namespace disaad {

inline constexpr const char* kVersion = "0.1.0";

// ---- configuration ----

inline json default_config() {
  const WorldConfig w;
  const LmArch arch;
  const TrainLmConfig lm;
  const CollectConfig col;
  return {
      {"seed", 1},
      {"workdir", "run"},
      {"world",
       {{"subjects", w.subjects},
        {"relations", w.relations},
        {"objects_per_relation", w.objects_per_relation},
        {"withheld_fraction", w.withheld_fraction},
        {"proxy_known_fraction", w.proxy_known_fraction},
        {"proxy_withheld_fraction", w.proxy_withheld_fraction},
        {"question_forms", w.question_forms},
        {"paraphrases", w.paraphrases}}},
      {"lm",
       {{"embed_dim", arch.embed_dim},
        {"context", arch.context},
        {"hidden", arch.hidden},
        {"epochs", lm.epochs},
        {"batch_size", lm.batch_size},
        {"learning_rate", lm.learning_rate},
        {"logit_anchor", lm.logit_anchor},
        {"anchor_weight", lm.anchor_weight}}},
      {"distill",
       {{"prompts", 100},
        {"responses", 10},
        {"low_temperature", col.low_temperature},
        {"high_temperature", col.high_temperature},
        {"high_samples", col.high_samples},
        {"max_response_len", 40},
        // Answers in the synthetic world are two tokens ("OBJ ."), so the
        // 15-word floor used for open-ended text would reject every QA prompt.
        {"min_length", 2},
        {"repetition_ngram", 4},
        {"repetition_max", 3},
        {"perplexity_percentile", 95.0},
        {"perplexity_filter", true}}},
      {"adversarial",
       {{"lambda", 0.1},
        {"proxy_lr", 0.5},
        {"disc_lr", 0.05},
        {"steps", 800},
        {"disc_updates_per_step", 2},
        {"disc_warmup", 400},
        {"batch_size", 8},
        {"eval_every", 1},
        {"lora_rank", 4},
        {"lora_scale", 2.0},
        {"max_rollout", 24},
        {"disc_embed", 16},
        {"disc_hidden", 16},
        {"disc_embed_sd", 3.0},
        {"val_fraction", 0.1},
        {"divergence_factor", 10.0},
        {"anchor_weight", lm.anchor_weight}}},
      {"evidence", {{"top_k", kDefaultTopK}, {"least_reliable_fraction", kDefaultLeastReliableFraction}}},
      {"metrics", {{"ece_bins", kDefaultEceBins}}},
      {"theory",
       {{"zipf_alpha", 2.0},
        {"support", 100000},
        {"ks", {100, 1000, 10000, 100000}},
        {"repeats", 200},
        {"smoothing", 0.5},
        {"delta", 0.1},
        {"slope_tolerance", 0.1},
        {"hoeffding_k", 1000},
        {"hoeffding_repeats", 1000}}},
  };
}

namespace pipeline_detail {

inline bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integer slots refuse fractional values.
    if ((a.is_number_integer() || a.is_number_unsigned()) && b.is_number_float()) return false;
    return true;
  }
  return a.type() == b.type();
}

// Copies `src` onto `dst`, refusing keys that are absent from the defaults.
inline void merge_strict(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) throw InputError("config" + path + ": expected an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path + "." + it.key();
    if (!dst.contains(it.key())) throw InputError("unknown config key '" + key.substr(1) + "'");
    json& slot = dst[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      if (!same_kind(slot, it.value()))
        throw InputError("config key '" + key.substr(1) + "' has the wrong type (expected " + slot.type_name() + ")");
      slot = it.value();
    }
  }
}

}  // namespace pipeline_detail

inline json load_config(const std::string& path) {
  json cfg = default_config();
  if (!path.empty()) pipeline_detail::merge_strict(cfg, read_json(path), "");
  return cfg;
}

// key.path=value; the value is parsed as JSON, falling back to a plain string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InputError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  pipeline_detail::merge_strict(cfg, patch, "");
}

inline std::uint64_t config_hash(const json& cfg) {
  json c = cfg;
  c.erase("workdir");
  return fnv1a(c.dump());
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

struct Settings {
  std::uint64_t seed = 1;
  std::string workdir;
  WorldConfig world;
  TrainLmConfig lm;  // arch.vocab_size filled from the world
  std::size_t prompts = 100;
  std::size_t responses = 10;
  CollectConfig collect;
  std::size_t max_response_len = 40;
  FilterConfig filter;
  bool perplexity_filter = true;
  AdvConfig adv;
  std::size_t top_k = kDefaultTopK;
  double fraction = kDefaultLeastReliableFraction;
  std::size_t ece_bins = kDefaultEceBins;
  double zipf_alpha = 2.0;
  std::size_t support = 100000;
  std::vector<std::size_t> ks;
  std::size_t repeats = 200;
  DecayOptions decay;
  std::size_t hoeffding_k = 1000;
  std::size_t hoeffding_repeats = 1000;
};

inline Settings settings_from(const json& c) {
  auto num = [](const json& o, const char* k) { return o.at(k).get<double>(); };
  auto cnt = [](const json& o, const char* k) {
    const auto& v = o.at(k);
    if (v.is_number_integer() && v.get<long long>() < 0) throw InputError(std::string("config key '") + k + "' must be >= 0");
    return v.get<std::size_t>();
  };
  Settings s;
  s.seed = c.at("seed").get<std::uint64_t>();
  s.workdir = c.at("workdir").get<std::string>();
  const auto& w = c.at("world");
  s.world.subjects = cnt(w, "subjects");
  s.world.relations = cnt(w, "relations");
  s.world.objects_per_relation = cnt(w, "objects_per_relation");
  s.world.withheld_fraction = num(w, "withheld_fraction");
  s.world.proxy_known_fraction = num(w, "proxy_known_fraction");
  s.world.proxy_withheld_fraction = num(w, "proxy_withheld_fraction");
  s.world.question_forms = cnt(w, "question_forms");
  s.world.paraphrases = cnt(w, "paraphrases");
  const auto& l = c.at("lm");
  s.lm.arch.embed_dim = cnt(l, "embed_dim");
  s.lm.arch.context = cnt(l, "context");
  s.lm.arch.hidden = cnt(l, "hidden");
  s.lm.epochs = cnt(l, "epochs");
  s.lm.batch_size = cnt(l, "batch_size");
  s.lm.learning_rate = num(l, "learning_rate");
  s.lm.logit_anchor = num(l, "logit_anchor");
  s.lm.anchor_weight = num(l, "anchor_weight");
  const auto& d = c.at("distill");
  s.prompts = cnt(d, "prompts");
  s.responses = cnt(d, "responses");
  s.collect.low_temperature = num(d, "low_temperature");
  s.collect.high_temperature = num(d, "high_temperature");
  s.collect.high_samples = cnt(d, "high_samples");
  s.max_response_len = cnt(d, "max_response_len");
  s.filter.min_length = cnt(d, "min_length");
  s.filter.repetition_ngram = cnt(d, "repetition_ngram");
  s.filter.repetition_max = cnt(d, "repetition_max");
  s.filter.perplexity_percentile = num(d, "perplexity_percentile");
  s.perplexity_filter = d.at("perplexity_filter").get<bool>();
  const auto& a = c.at("adversarial");
  s.adv.lambda = num(a, "lambda");
  s.adv.proxy_lr = num(a, "proxy_lr");
  s.adv.disc_lr = num(a, "disc_lr");
  s.adv.steps = cnt(a, "steps");
  s.adv.disc_updates_per_step = cnt(a, "disc_updates_per_step");
  s.adv.disc_warmup = cnt(a, "disc_warmup");
  s.adv.batch_size = cnt(a, "batch_size");
  s.adv.eval_every = cnt(a, "eval_every");
  s.adv.lora_rank = cnt(a, "lora_rank");
  s.adv.lora_scale = num(a, "lora_scale");
  s.adv.max_rollout = cnt(a, "max_rollout");
  s.adv.disc_embed = cnt(a, "disc_embed");
  s.adv.disc_hidden = cnt(a, "disc_hidden");
  s.adv.disc_embed_sd = num(a, "disc_embed_sd");
  s.adv.val_fraction = num(a, "val_fraction");
  s.adv.divergence_factor = num(a, "divergence_factor");
  s.adv.anchor.weight = num(a, "anchor_weight");
  s.adv.anchor.target = s.lm.logit_anchor;  // same offset the base proxy was pretrained with
  const auto& e = c.at("evidence");
  s.top_k = cnt(e, "top_k");
  s.fraction = num(e, "least_reliable_fraction");
  s.ece_bins = cnt(c.at("metrics"), "ece_bins");
  const auto& t = c.at("theory");
  s.zipf_alpha = num(t, "zipf_alpha");
  s.support = cnt(t, "support");
  s.ks = t.at("ks").get<std::vector<std::size_t>>();
  s.repeats = cnt(t, "repeats");
  s.decay.smoothing = num(t, "smoothing");
  s.decay.delta = num(t, "delta");
  s.decay.slope_tolerance = num(t, "slope_tolerance");
  s.hoeffding_k = cnt(t, "hoeffding_k");
  s.hoeffding_repeats = cnt(t, "hoeffding_repeats");
  if (s.top_k < 1) throw InputError("evidence.top_k must be >= 1");
  if (s.responses < 1) throw InputError("distill.responses must be >= 1");
  if (s.max_response_len < 1) throw InputError("distill.max_response_len must be >= 1");
  return s;
}

// ---- work directory layout ----

struct Paths {
  std::filesystem::path root;

  std::string at(const std::string& rel) const { return (root / rel).string(); }

  static constexpr const char* vocab = "world/vocab.txt";
  static constexpr const char* facts = "world/facts.jsonl";
  static constexpr const char* qa = "world/qa.jsonl";
  static constexpr const char* gold = "world/gold.jsonl";
  static constexpr const char* target_corpus = "world/target_corpus.txt";
  static constexpr const char* proxy_corpus = "world/proxy_corpus.txt";
  static constexpr const char* target_model = "models/target.lm";
  static constexpr const char* target_report = "models/target.json";
  static constexpr const char* proxy_model = "models/proxy_base.lm";
  static constexpr const char* proxy_report = "models/proxy_base.json";
  static constexpr const char* prompts = "distill/prompts.jsonl";
  static constexpr const char* dataset = "distill/dataset.jsonl";
  static constexpr const char* rejected = "distill/rejected.jsonl";
  static constexpr const char* eval_responses = "distill/eval_responses.jsonl";
  static constexpr const char* adapters = "distill/proxy.lora";
  static constexpr const char* train_log = "distill/train_log.jsonl";
  static constexpr const char* distill_summary = "distill/summary.json";
  static constexpr const char* scores_distilled = "score/distilled.jsonl";
  static constexpr const char* scores_base = "score/base.jsonl";
  static constexpr const char* eval_report = "eval/report.json";
  static constexpr const char* eval_pairs = "eval/pairs.csv";
  static constexpr const char* eval_calibration = "eval/calibration.csv";
  static constexpr const char* theory_report = "theory/report.json";
  static constexpr const char* theory_decay = "theory/decay.csv";
  static constexpr const char* plot_gap = "plots/gap.csv";
  static constexpr const char* plot_roc = "plots/roc.csv";
  static constexpr const char* plot_pr = "plots/pr.csv";
  static constexpr const char* plot_decay = "plots/decay.csv";
  static constexpr const char* manifest = "manifest.json";
};

// Output collector for one command: creates parent directories and remembers
// what was written so the manifest can list it.
class Outputs {
 public:
  explicit Outputs(Paths p) : paths_(std::move(p)) {}

  std::string path(const std::string& rel) {
    const auto full = paths_.root / rel;
    std::filesystem::create_directories(full.parent_path());
    written_.push_back(rel);
    return full.string();
  }

  const std::vector<std::string>& written() const { return written_; }

 private:
  Paths paths_;
  std::vector<std::string> written_;
};

inline std::string require(const Paths& p, const char* rel, const char* producer) {
  const auto full = p.at(rel);
  if (!std::filesystem::exists(full))
    throw InputError("missing " + full + " (run '" + producer + "' first)");
  return full;
}

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a(ss.str());
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Records one command's outputs. Files of earlier commands stay listed only
// while they still exist, so the list never names missing files.
inline void update_manifest(const Paths& p, const std::string& command, const json& cfg, const Outputs& out) {
  const auto mpath = p.at(Paths::manifest);
  json m;
  if (std::filesystem::exists(mpath)) {
    try {
      m = read_json(mpath);
    } catch (const InputError&) {
      m = json::object();
    }
  }
  if (!m.is_object()) m = json::object();
  json commands = m.contains("commands") && m["commands"].is_object() ? m["commands"] : json::object();
  std::set<std::string> files(out.written().begin(), out.written().end());
  commands[command] = {{"config_hash", hex64(config_hash(cfg))},
                       {"timestamp", utc_timestamp()},
                       {"outputs", json(std::vector<std::string>(files.begin(), files.end()))}};
  json kept = json::object();
  std::map<std::string, json> listing;
  for (auto it = commands.begin(); it != commands.end(); ++it) {
    std::vector<std::string> present;
    for (const auto& f : it.value()["outputs"]) {
      const auto rel = f.get<std::string>();
      if (std::filesystem::exists(p.at(rel))) present.push_back(rel);
    }
    if (present.empty()) continue;
    json entry = it.value();
    entry["outputs"] = present;
    kept[it.key()] = entry;
    for (const auto& rel : present)
      listing[rel] = {{"bytes", std::filesystem::file_size(p.at(rel))}, {"fnv1a64", hex64(file_hash(p.at(rel)))},
                      {"command", it.key()}};
  }
  json files_sorted = json::object();
  for (auto& [k, v] : listing) files_sorted[k] = v;
  write_json(mpath, {{"version", kVersion},
                     {"config_hash", hex64(config_hash(cfg))},
                     {"seed", cfg.at("seed")},
                     {"updated", utc_timestamp()},
                     {"commands", kept},
                     {"files", files_sorted}});
}

// ---- shared loaders ----

struct LoadedWorld {
  Vocabulary vocab;
  std::vector<PromptEntry> in_domain;
  std::vector<PromptEntry> open_domain;
  std::map<std::string, std::vector<TokenSeq>> gold;
  std::map<std::string, std::string> split;  // in-domain id -> known / withheld
};

inline LoadedWorld load_world(const Paths& p) {
  LoadedWorld w;
  w.vocab = Vocabulary::load(require(p, Paths::vocab, "gen-world"));
  for (const auto& r : read_jsonl(require(p, Paths::qa, "gen-world"))) {
    auto e = parse_prompt_record(r, w.vocab);
    (e.source == PromptSource::in_domain ? w.in_domain : w.open_domain).push_back(std::move(e));
  }
  for (const auto& r : read_jsonl(require(p, Paths::gold, "gen-world"))) {
    const auto id = field<std::string>(r, "id");
    for (const auto& g : field<std::vector<std::string>>(r, "gold")) w.gold[id].push_back(w.vocab.encode(g));
    if (r.contains("split")) w.split[id] = field<std::string>(r, "split");
  }
  return w;
}

inline LmParams load_model_for(const Paths& p, const char* rel, const char* producer, const Vocabulary& v) {
  auto m = load_lm(require(p, rel, producer));
  if (m.vocab_size() != v.size())
    throw InputError(std::string(rel) + " has vocabulary size " + std::to_string(m.vocab_size()) + ", world has " +
                     std::to_string(v.size()));
  return m;
}

// ---- commands ----

struct CommandResult {
  std::vector<std::string> lines;  // human-readable summary for stdout
};

inline CommandResult cmd_gen_world(const json& cfg) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  Outputs out(p);
  const auto w = generate_world(s.world, substream_seed(s.seed, "world"));
  w.vocab.save(out.path(Paths::vocab));
  std::vector<json> facts, qa, gold;
  for (std::size_t i = 0; i < w.facts.size(); ++i) facts.push_back(fact_record(w.facts[i], i));
  for (const auto* items : {&w.in_domain, &w.open_domain})
    for (const auto& q : *items) {
      qa.push_back(prompt_record(to_prompt_entry(q), w.vocab));
      gold.push_back(gold_record(q, w));
    }
  write_jsonl(out.path(Paths::facts), facts);
  write_jsonl(out.path(Paths::qa), qa);
  write_jsonl(out.path(Paths::gold), gold);
  save_corpus(out.path(Paths::target_corpus), w.target_corpus, w.vocab);
  save_corpus(out.path(Paths::proxy_corpus), w.proxy_corpus, w.vocab);
  update_manifest(p, "gen-world", cfg, out);
  std::size_t withheld = 0;
  for (const auto& f : w.facts) withheld += f.split == FactSplit::withheld;
  return {{"facts " + std::to_string(w.facts.size()) + " (" + std::to_string(withheld) + " withheld)",
           "vocabulary " + std::to_string(w.vocab.size()),
           "qa items " + std::to_string(w.in_domain.size()) + " in-domain, " + std::to_string(w.open_domain.size()) +
               " open-domain"}};
}

namespace pipeline_detail {

inline CommandResult train_model(const json& cfg, const char* corpus_rel, const char* model_rel, const char* report_rel,
                                 const char* stream, const char* command) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  const auto vocab = Vocabulary::load(require(p, Paths::vocab, "gen-world"));
  const auto corpus = load_corpus(require(p, corpus_rel, "gen-world"), vocab);
  if (corpus.empty()) throw InputError(std::string(corpus_rel) + " is empty");
  auto tc = s.lm;
  tc.arch.vocab_size = vocab.size();
  tc.seed = substream_seed(s.seed, stream);
  const auto res = train_lm(corpus, tc);
  if (!std::isfinite(res.final_nll)) throw DivergenceError(std::string(command) + ": non-finite training loss");
  Outputs out(p);
  save_lm(out.path(model_rel), res.params);
  write_json(out.path(report_rel), {{"corpus", corpus.size()},
                                    {"initial_nll", res.initial_nll},
                                    {"final_nll", res.final_nll},
                                    {"epochs", tc.epochs}});
  update_manifest(p, command, cfg, out);
  std::ostringstream os;
  os << "nll " << res.initial_nll << " -> " << res.final_nll << " on " << corpus.size() << " sequences";
  return {{os.str()}};
}

}  // namespace pipeline_detail

inline CommandResult cmd_train_target(const json& cfg) {
  return pipeline_detail::train_model(cfg, Paths::target_corpus, Paths::target_model, Paths::target_report,
                                      "train-target", "train-target");
}

// The base proxy: same architecture, pretrained on its own partial corpus.
inline CommandResult cmd_train_proxy(const json& cfg) {
  return pipeline_detail::train_model(cfg, Paths::proxy_corpus, Paths::proxy_model, Paths::proxy_report,
                                      "train-proxy", "train-proxy");
}

struct Collected {
  PromptSet prompts;
  DistillDataset dataset;
  std::vector<ResponseItem> eval_responses;
};

// Prompt mix, candidate sampling and filtering, plus the target's greedy
// answers to the in-domain questions that were not used for distillation.
inline Collected collect_data(const Settings& s, const Paths& p, const LoadedWorld& w) {
  const auto target = load_model_for(p, Paths::target_model, "train-target", w.vocab);
  std::optional<LmParams> scorer;
  if (s.perplexity_filter) scorer = load_model_for(p, Paths::proxy_model, "train-proxy", w.vocab);

  Collected c;
  c.prompts = mix_prompts(w.in_domain, w.open_domain, s.prompts, substream_seed(s.seed, "prompts"));
  const auto handle = sampling_handle(target, s.max_response_len);
  std::optional<LmView> view;
  if (scorer) view = LmView(*scorer);
  c.dataset = build_distill_dataset(handle, c.prompts, s.responses, s.collect, s.filter, view,
                                    substream_seed(s.seed, "collect"));

  std::set<std::string> used;
  for (const auto& e : c.prompts.prompts) used.insert(e.id);
  for (const auto& q : w.in_domain) {
    if (used.contains(q.id)) continue;
    c.eval_responses.push_back({q.id, q.prompt, handle.sample(q.prompt, 0.0, 0)});
  }
  return c;
}

inline void write_collected(const Collected& c, const Vocabulary& v, Outputs& out) {
  std::vector<json> prompts, samples, rejected, responses;
  for (const auto& e : c.prompts.prompts) prompts.push_back(prompt_record(e, v));
  for (const auto& smp : c.dataset.samples) samples.push_back(sample_record(smp, v));
  for (const auto& [id, prov] : c.dataset.rejected) rejected.push_back(rejection_record(id, prov));
  for (const auto& r : c.eval_responses) responses.push_back(response_record(r, v));
  write_jsonl(out.path(Paths::prompts), prompts);
  write_jsonl(out.path(Paths::dataset), samples);
  write_jsonl(out.path(Paths::rejected), rejected);
  write_jsonl(out.path(Paths::eval_responses), responses);
}

inline void check_dataset(const Collected& c) {
  if (c.dataset.samples.empty())
    throw InputError("all " + std::to_string(c.prompts.prompts.size()) +
                     " prompts were rejected during filtering; responsible filter: " + c.dataset.dominant_rejection());
}

inline CommandResult cmd_collect(const json& cfg) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  const auto w = load_world(p);
  const auto c = collect_data(s, p, w);
  Outputs out(p);
  write_collected(c, w.vocab, out);
  update_manifest(p, "collect", cfg, out);
  check_dataset(c);
  return {{"kept " + std::to_string(c.dataset.samples.size()) + " of " + std::to_string(c.prompts.prompts.size()) +
               " prompts",
           "held-out responses " + std::to_string(c.eval_responses.size())}};
}

inline CommandResult cmd_distill(const json& cfg) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  const auto w = load_world(p);
  const auto base = load_model_for(p, Paths::proxy_model, "train-proxy", w.vocab);
  const auto c = collect_data(s, p, w);
  Outputs out(p);
  write_collected(c, w.vocab, out);
  check_dataset(c);

  AdvResult res;
  try {
    res = run_adversarial(c.dataset.samples, base, s.adv, substream_seed(s.seed, "adversarial"));
  } catch (const DivergenceError&) {
    update_manifest(p, "distill", cfg, out);
    throw;
  }
  std::vector<json> log;
  for (const auto& r : res.state.log) log.push_back(step_record(r));
  write_jsonl(out.path(Paths::train_log), log);
  save_adapters(out.path(Paths::adapters), res.best);
  const auto& first = res.state.snapshots.front();
  const ValSnapshot* best = nullptr;
  for (const auto& v : res.state.snapshots)
    if (v.step == res.best_step) best = &v;
  write_json(out.path(Paths::distill_summary),
             {{"samples", c.dataset.samples.size()},
              {"train_size", res.train_size},
              {"val_size", res.val_size},
              {"steps", s.adv.steps},
              {"disc_updates", res.state.log.back().disc_updates},
              {"proxy_updates", res.state.log.back().proxy_updates},
              {"best_step", res.best_step},
              {"best_criterion", res.best_criterion},
              {"initial_val_task", first.val_task},
              {"initial_gap", first.gap},
              {"best_val_task", best->val_task},
              {"best_gap", best->gap}});
  update_manifest(p, "distill", cfg, out);
  std::ostringstream os;
  os << "best step " << res.best_step << ": val task " << best->val_task << ", gap " << best->gap
     << " (step 0: " << first.val_task << ", " << first.gap << ")";
  return {{"dataset " + std::to_string(c.dataset.samples.size()) + " samples", os.str()}};
}

struct ScoreOptions {
  std::string responses;                 // empty: held-out target answers from collect/distill
  std::string proxy = "both";            // distilled | base | both
};

inline std::vector<json> score_file(const std::vector<ResponseItem>& items, LmView proxy, const Settings& s,
                                    const Vocabulary& v) {
  std::vector<json> rows;
  for (const auto& it : items) rows.push_back(score_record(it, score_response(proxy, it.prompt, it.response, s.top_k, s.fraction), v));
  return rows;
}

inline CommandResult cmd_score(const json& cfg, const ScoreOptions& opt = {}) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  if (opt.proxy != "both" && opt.proxy != "distilled" && opt.proxy != "base")
    throw InputError("--proxy must be distilled, base or both");
  const auto vocab = Vocabulary::load(require(p, Paths::vocab, "gen-world"));
  const auto base = load_model_for(p, Paths::proxy_model, "train-proxy", vocab);
  const std::string src = opt.responses.empty() ? require(p, Paths::eval_responses, "collect") : opt.responses;
  std::vector<ResponseItem> items;
  for (const auto& r : read_jsonl(src)) items.push_back(parse_response_record(r, vocab));
  if (items.empty()) throw InputError(src + " contains no responses");

  Outputs out(p);
  CommandResult res;
  std::size_t empty = 0;
  for (const auto& it : items) empty += it.response.empty();
  if (opt.proxy != "base") {
    const auto adapters = load_adapters(require(p, Paths::adapters, "distill"));
    adapters.hidden.validate_against(base.w_hidden);
    adapters.output.validate_against(base.w_out);
    write_jsonl(out.path(Paths::scores_distilled), score_file(items, LmView(base, &adapters), s, vocab));
  }
  if (opt.proxy != "distilled") write_jsonl(out.path(Paths::scores_base), score_file(items, LmView(base), s, vocab));
  update_manifest(p, "score", cfg, out);
  res.lines.push_back("scored " + std::to_string(items.size()) + " responses (" + std::to_string(empty) + " empty)");
  return res;
}

namespace pipeline_detail {

struct Scored {
  std::vector<LabeledScore> items;
  std::vector<std::string> ids;
  std::size_t skipped_empty = 0;
};

inline Scored labeled_scores(const std::string& path, const LoadedWorld& w) {
  Scored out;
  for (const auto& r : read_jsonl(path)) {
    const auto id = field<std::string>(r, "id");
    if (field<bool>(r, "empty")) {
      ++out.skipped_empty;
      continue;
    }
    auto g = w.gold.find(id);
    if (g == w.gold.end()) throw InputError(path + ": no gold answer for '" + id + "'");
    const auto resp = text_field(r, "response", w.vocab, SeqRole::response);
    out.items.push_back({field<double>(r, "r_response"), label_correctness(resp, g->second, w.vocab)});
    out.ids.push_back(id);
  }
  return out;
}

inline json metric_block(const Scored& sc, std::size_t bins) {
  std::size_t pos = 0;
  for (const auto& x : sc.items) pos += x.label;
  json j = {{"n", sc.items.size()}, {"positives", pos}, {"skipped_empty", sc.skipped_empty}};
  auto guarded = [&](const char* name, auto fn) {
    try {
      j[name] = fn();
    } catch (const UndefinedMetricError& e) {
      j[name] = nullptr;
      j[std::string(name) + "_error"] = e.what();
    }
  };
  guarded("auroc", [&] { return auroc(sc.items); });
  guarded("aupr", [&] { return aupr(sc.items); });
  if (!sc.items.empty()) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& x : sc.items) {
      scores.push_back(x.score);
      labels.push_back(x.label);
    }
    const auto rep = ece(reliability_to_confidence(scores), labels, bins);
    j["ece"] = rep.ece;
    json bj = json::array();
    for (const auto& b : rep.per_bin)
      bj.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}, {"confidence", b.confidence},
                    {"accuracy", b.accuracy}, {"weight", b.weight}});
    j["bins"] = bj;
  }
  return j;
}

}  // namespace pipeline_detail

inline CommandResult cmd_eval(const json& cfg) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  const auto w = load_world(p);
  const auto dist = pipeline_detail::labeled_scores(require(p, Paths::scores_distilled, "score"), w);
  const auto base = pipeline_detail::labeled_scores(require(p, Paths::scores_base, "score"), w);
  if (dist.ids != base.ids) throw InputError("distilled and base score files cover different responses");

  json report = {{"distilled", pipeline_detail::metric_block(dist, s.ece_bins)},
                 {"base", pipeline_detail::metric_block(base, s.ece_bins)}};
  const json da = report["distilled"]["auroc"];
  const json ba = report["base"]["auroc"];
  report["distilled_beats_base"] = da.is_number() && ba.is_number() && da.get<double>() > ba.get<double>();
  report["both_above_chance"] = da.is_number() && ba.is_number() && da.get<double>() > 0.5 && ba.get<double>() > 0.5;

  Outputs out(p);
  write_json(out.path(Paths::eval_report), report);
  {
    std::ofstream f(out.path(Paths::eval_pairs), std::ios::binary);
    f << "id,split,label,r_distilled,r_base\n" << std::setprecision(17);
    for (std::size_t i = 0; i < dist.ids.size(); ++i) {
      auto sp = w.split.find(dist.ids[i]);
      f << dist.ids[i] << ',' << (sp == w.split.end() ? "" : sp->second) << ',' << dist.items[i].label << ','
        << dist.items[i].score << ',' << base.items[i].score << '\n';
    }
  }
  {
    std::ofstream f(out.path(Paths::eval_calibration), std::ios::binary);
    f << "proxy,lower,upper,count,confidence,accuracy,weight\n" << std::setprecision(17);
    for (const char* name : {"distilled", "base"})
      if (report[name].contains("bins"))
        for (const auto& b : report[name]["bins"])
          f << name << ',' << b["lower"].get<double>() << ',' << b["upper"].get<double>() << ','
            << b["count"].get<std::size_t>() << ',' << b["confidence"].get<double>() << ','
            << b["accuracy"].get<double>() << ',' << b["weight"].get<double>() << '\n';
  }
  update_manifest(p, "eval", cfg, out);
  auto fmt = [](const json& v) { return v.is_number() ? std::to_string(v.get<double>()) : std::string("undefined"); };
  return {{"n " + std::to_string(dist.items.size()) + ", correct " + std::to_string(report["distilled"]["positives"].get<std::size_t>()),
           "AUROC distilled " + fmt(da) + ", base " + fmt(ba),
           "AUPR distilled " + fmt(report["distilled"]["aupr"]) + ", base " + fmt(report["base"]["aupr"])}};
}

inline CommandResult cmd_theory(const json& cfg) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  const auto model = zipf_probs(s.support, s.zipf_alpha);
  const auto rep = run_decay_experiment(model, s.ks, s.repeats, substream_seed(s.seed, "theory"), s.decay);
  const auto hoe = hoeffding_check(model.probs, s.hoeffding_k, s.hoeffding_repeats, s.decay.delta,
                                   substream_seed(s.seed, "theory-hoeffding"));
  Outputs out(p);
  {
    std::ofstream f(out.path(Paths::theory_decay), std::ios::binary);
    f << "k,mean_missing_mass,std_missing_mass,mean_kl\n" << std::setprecision(17);
    for (const auto& r : rep.rows)
      f << r.k << ',' << r.mean_missing_mass << ',' << r.std_missing_mass << ',' << r.mean_kl << '\n';
  }
  json rows = json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"k", r.k}, {"mean_missing_mass", r.mean_missing_mass}, {"std_missing_mass", r.std_missing_mass},
                    {"mean_kl", r.mean_kl}});
  write_json(out.path(Paths::theory_report),
             {{"zipf_alpha", s.zipf_alpha},
              {"support", s.support},
              {"repeats", rep.repeats},
              {"rows", rows},
              {"fit_points", rep.fit_points},
              {"slope", rep.slope},
              {"gamma_hat", rep.gamma_hat},
              {"beta", rep.beta},
              {"c1", rep.c1},
              {"c2", rep.c2},
              {"kl_non_increasing", rep.kl_non_increasing},
              {"pass", rep.pass},
              {"hoeffding",
               {{"k", hoe.k},
                {"repeats", hoe.repeats},
                {"delta", hoe.delta},
                {"band", hoe.band},
                {"mean_missing_mass", hoe.mean_missing_mass},
                {"violation_rate", hoe.violation_rate},
                {"pass", hoe.ok()}}}});
  update_manifest(p, "theory", cfg, out);
  std::ostringstream os;
  os << "slope " << rep.slope << " (target " << -rep.beta << "), decay " << (rep.pass ? "pass" : "FAIL")
     << "; hoeffding violations " << hoe.violation_rate << " " << (hoe.ok() ? "pass" : "FAIL");
  return {{os.str()}};
}

namespace pipeline_detail {

// (threshold, fpr, tpr, precision, recall) at every distinct score, highest first.
inline std::vector<std::array<double, 5>> curve_points(std::vector<LabeledScore> items) {
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double pos = 0, neg = 0;
  for (const auto& x : items) (x.label ? pos : neg) += 1;
  std::vector<std::array<double, 5>> pts;
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    (items[i].label ? tp : fp) += 1;
    if (i + 1 < items.size() && items[i + 1].score == items[i].score) continue;
    pts.push_back({items[i].score, neg > 0 ? fp / neg : 0.0, pos > 0 ? tp / pos : 0.0, tp / (tp + fp),
                   pos > 0 ? tp / pos : 0.0});
  }
  return pts;
}

}  // namespace pipeline_detail

inline CommandResult cmd_plotdata(const json& cfg) {
  const auto s = settings_from(cfg);
  const Paths p{s.workdir};
  Outputs out(p);
  CommandResult res;
  const auto log = read_jsonl(require(p, Paths::train_log, "distill"));
  {
    std::ofstream f(out.path(Paths::plot_gap), std::ios::binary);
    f << "step,disc_updates,proxy_updates,task,reg,total,disc,val_task,gap\n" << std::setprecision(17);
    for (const auto& r : log) {
      f << r["step"].get<std::size_t>() << ',' << r["disc_updates"].get<std::size_t>() << ','
        << r["proxy_updates"].get<std::size_t>() << ',' << r["task"].get<double>() << ',' << r["reg"].get<double>()
        << ',' << r["total"].get<double>() << ',' << r["disc"].get<double>() << ',';
      if (r.contains("gap")) f << r["val_task"].get<double>() << ',' << r["gap"].get<double>();
      else f << ',';
      f << '\n';
    }
  }
  res.lines.push_back("gap rows " + std::to_string(log.size()));

  const auto w = load_world(p);
  std::ofstream roc(out.path(Paths::plot_roc), std::ios::binary);
  std::ofstream pr(out.path(Paths::plot_pr), std::ios::binary);
  roc << "proxy,threshold,fpr,tpr\n" << std::setprecision(17);
  pr << "proxy,threshold,recall,precision\n" << std::setprecision(17);
  for (const auto& [name, rel] : {std::pair{"distilled", Paths::scores_distilled}, std::pair{"base", Paths::scores_base}}) {
    const auto sc = pipeline_detail::labeled_scores(require(p, rel, "score"), w);
    roc << name << ",inf,0,0\n";
    for (const auto& pt : pipeline_detail::curve_points(sc.items)) {
      roc << name << ',' << pt[0] << ',' << pt[1] << ',' << pt[2] << '\n';
      pr << name << ',' << pt[0] << ',' << pt[4] << ',' << pt[3] << '\n';
    }
  }
  if (std::filesystem::exists(p.at(Paths::theory_decay))) {
    std::filesystem::copy_file(p.at(Paths::theory_decay), out.path(Paths::plot_decay),
                               std::filesystem::copy_options::overwrite_existing);
  }
  update_manifest(p, "plotdata", cfg, out);
  return res;
}

}  // namespace disaad
