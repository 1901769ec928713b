#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "disaad/advtrain.hpp"
#include "disaad/distillset.hpp"
#include "disaad/evidence.hpp"
#include "disaad/world.hpp"

// Line-delimited JSON records shared by the world files, the distillation set
// and the scoring output. Token sequences are stored as space-separated text
// so files stay readable and a vocabulary mismatch shows up on load.
namespace disaad {

using json = nlohmann::ordered_json;

inline std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path);
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  for (const auto& r : rows) out << r.dump() << '\n';
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << j.dump(2) << '\n';
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
}

template <class T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw InputError(std::string("record missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InputError(std::string("field '") + key + "': " + e.what());
  }
}

inline TokenSeq text_field(const json& j, const char* key, const Vocabulary& v, SeqRole role) {
  return v.encode(field<std::string>(j, key), role);
}

// ---- world ----

inline json fact_record(const Fact& f, std::size_t index) {
  return {{"index", index},        {"subject", f.subject},          {"relation", f.relation},
          {"object", f.object},    {"split", to_string(f.split)},   {"proxy_known", f.proxy_known}};
}

inline json prompt_record(const PromptEntry& p, const Vocabulary& v) {
  return {{"id", p.id}, {"source", to_string(p.source)}, {"prompt", v.decode(p.prompt)}};
}

inline PromptEntry parse_prompt_record(const json& j, const Vocabulary& v) {
  return {field<std::string>(j, "id"), text_field(j, "prompt", v, SeqRole::prompt),
          parse_source(field<std::string>(j, "source"))};
}

// Gold sidecar: one line per QA item.
inline json gold_record(const QaItem& q, const World& w) {
  json gold = json::array();
  for (const auto& g : q.gold) gold.push_back(w.vocab.decode(g));
  json r = {{"id", q.id}, {"gold", gold}};
  if (q.source == PromptSource::in_domain) {
    r["fact"] = q.fact;
    r["split"] = to_string(w.facts[q.fact].split);
  }
  return r;
}

// ---- distillation set ----

inline json provenance_record(const FilterProvenance& p) {
  json j = {{"candidates", p.candidates},
            {"too_short", p.too_short},
            {"repetitive", p.repetitive},
            {"high_perplexity", p.high_perplexity},
            {"ranked_out", p.ranked_out},
            {"perplexity_threshold", p.perplexity_threshold},
            {"selected_similarity", p.selected_similarity}};
  if (!p.rejected_by.empty()) j["rejected_by"] = p.rejected_by;
  return j;
}

inline FilterProvenance parse_provenance(const json& j) {
  FilterProvenance p;
  p.candidates = field<std::size_t>(j, "candidates");
  p.too_short = field<std::size_t>(j, "too_short");
  p.repetitive = field<std::size_t>(j, "repetitive");
  p.high_perplexity = field<std::size_t>(j, "high_perplexity");
  p.ranked_out = field<std::size_t>(j, "ranked_out");
  p.perplexity_threshold = field<double>(j, "perplexity_threshold");
  p.selected_similarity = field<std::vector<double>>(j, "selected_similarity");
  if (j.contains("rejected_by")) p.rejected_by = field<std::string>(j, "rejected_by");
  return p;
}

inline json sample_record(const DistillSample& s, const Vocabulary& v) {
  json resp = json::array();
  for (const auto& r : s.responses) resp.push_back(v.decode(r));
  return {{"id", s.id},
          {"source", to_string(s.source)},
          {"prompt", v.decode(s.prompt)},
          {"responses", resp},
          {"provenance", provenance_record(s.provenance)}};
}

inline DistillSample parse_sample_record(const json& j, const Vocabulary& v) {
  DistillSample s;
  s.id = field<std::string>(j, "id");
  s.source = parse_source(field<std::string>(j, "source"));
  s.prompt = text_field(j, "prompt", v, SeqRole::prompt);
  for (const auto& r : field<std::vector<std::string>>(j, "responses")) s.responses.push_back(v.encode(r));
  if (s.responses.empty()) throw InputError("distill sample '" + s.id + "' has no responses");
  if (j.contains("provenance")) s.provenance = parse_provenance(j.at("provenance"));
  return s;
}

inline json rejection_record(const std::string& id, const FilterProvenance& p) {
  json j = provenance_record(p);
  j["id"] = id;
  return j;
}

// ---- training log ----

inline json step_record(const StepRecord& r) {
  json j = {{"step", r.step},   {"disc_updates", r.disc_updates}, {"proxy_updates", r.proxy_updates},
            {"task", r.task},   {"reg", r.reg},                   {"total", r.total},
            {"disc", r.disc},   {"anchor", r.anchor}};
  if (r.evaluated) {
    j["val_task"] = r.val_task;
    j["gap"] = r.gap;
  }
  return j;
}

// ---- scoring ----

// Responses to score: {"id", "prompt", "response"}.
struct ResponseItem {
  std::string id;
  TokenSeq prompt;
  TokenSeq response;
};

inline json response_record(const ResponseItem& r, const Vocabulary& v) {
  return {{"id", r.id}, {"prompt", v.decode(r.prompt)}, {"response", v.decode(r.response)}};
}

inline ResponseItem parse_response_record(const json& j, const Vocabulary& v) {
  return {field<std::string>(j, "id"), text_field(j, "prompt", v, SeqRole::prompt),
          text_field(j, "response", v, SeqRole::response)};
}

inline json score_record(const ResponseItem& item, const ScoredResponse& s, const Vocabulary& v) {
  json tokens = json::array();
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    const auto& ev = s.evidence[i];
    const auto& u = s.tokens[i];
    tokens.push_back({{"position", u.position},
                      {"token", v.token(item.response.ids[i])},
                      {"alpha0", ev.alpha0},
                      {"alpha_max", ev.alphas.empty() ? 0.0 : *std::max_element(ev.alphas.begin(), ev.alphas.end())},
                      {"k", ev.alphas.size()},
                      {"au", u.au},
                      {"eu", u.eu},
                      {"r", u.r}});
  }
  return {{"id", item.id},
          {"prompt", v.decode(item.prompt)},
          {"response", v.decode(item.response)},
          {"empty", s.empty},
          {"k_star", s.reliability.k_star},
          {"r_response", s.reliability.r_response},
          {"tokens", tokens}};
}

}  // namespace disaad
