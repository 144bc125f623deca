#include "ctxrefine/dataset_io.hpp"

#include <algorithm>
#include <sstream>

#include "ctxrefine/hash.hpp"
#include "ctxrefine/rubric.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {

using nlohmann::json;

json tag_schema(json j, std::string_view schema_name) {
  j["schema"] = schema_name;
  j["schema_version"] = kSchemaVersion;
  return j;
}

void require_schema(const json& j, std::string_view schema_name) {
  if (!j.is_object()) throw ValidationError("record is not a JSON object");
  if (!j.contains("schema") || !j["schema"].is_string() || j["schema"].get<std::string>() != schema_name)
    throw ValidationError("expected schema '" + std::string(schema_name) + "'");
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer() ||
      j["schema_version"].get<int>() != kSchemaVersion)
    throw ValidationError("unsupported schema_version for '" + std::string(schema_name) + "'");
}

namespace {

// Wraps nlohmann type/key errors so callers see one exception type.
template <typename F>
auto decoding(std::string_view what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ValidationError("malformed " + std::string(what) + ": " + e.what());
  }
}

std::string non_empty(const json& j, const char* key) {
  auto s = j.at(key).get<std::string>();
  if (text::trim(s).empty()) throw ValidationError(std::string("field '") + key + "' must be non-empty");
  return s;
}

}  // namespace

json encode(const SynthQuery& q) {
  return tag_schema({{"query_id", q.query_id},
                     {"text", q.text},
                     {"attributes", q.attribute_set},
                     {"generator_model", q.generator_model},
                     {"created_at", q.created_at}},
                    schema::kQuery);
}

SynthQuery decode_query(const json& j) {
  require_schema(j, schema::kQuery);
  return decoding("query", [&] {
    SynthQuery q;
    q.query_id = non_empty(j, "query_id");
    q.text = non_empty(j, "text");
    q.attribute_set = j.at("attributes").get<AttributeSet>();
    q.generator_model = j.at("generator_model").get<std::string>();
    q.created_at = j.value("created_at", std::string{});
    return q;
  });
}

json encode(const TeacherResponse& t) {
  return tag_schema({{"query_id", t.query_id},
                     {"query_text", t.query_text},
                     {"thinking", t.thinking},
                     {"answer", t.answer},
                     {"teacher_model", t.teacher_model},
                     {"word_count_answer", t.word_count_answer}},
                    schema::kTeacherResponse);
}

TeacherResponse decode_teacher_response(const json& j) {
  require_schema(j, schema::kTeacherResponse);
  return decoding("teacher response", [&] {
    TeacherResponse t;
    t.query_id = non_empty(j, "query_id");
    t.query_text = non_empty(j, "query_text");
    t.thinking = j.at("thinking").get<std::string>();
    t.answer = non_empty(j, "answer");
    t.teacher_model = j.at("teacher_model").get<std::string>();
    t.word_count_answer = j.at("word_count_answer").get<std::size_t>();
    if (t.word_count_answer != text::count_words(t.answer))
      throw ValidationError("word_count_answer does not match the answer");
    return t;
  });
}

json encode(const RefinementRecord& r) {
  json rationales = json::array();
  for (const auto& s : r.rationales)
    rationales.push_back({{"facet", to_string(s.facet)}, {"rationale", s.rationale}, {"is_noop", s.is_noop}});
  return tag_schema({{"query_id", r.query_id},
                     {"query_text", r.query_text},
                     {"t0", r.t0},
                     {"r0", r.r0},
                     {"rationales", rationales},
                     {"t_prime", r.t_prime},
                     {"r_prime", r.r_prime},
                     {"strategy", to_string(r.strategy)},
                     {"model_id", r.model_id}},
                    schema::kRefinement);
}

RefinementRecord decode_refinement(const json& j) {
  require_schema(j, schema::kRefinement);
  return decoding("refinement record", [&] {
    RefinementRecord r;
    r.query_id = non_empty(j, "query_id");
    r.query_text = non_empty(j, "query_text");
    r.t0 = j.at("t0").get<std::string>();
    r.r0 = j.at("r0").get<std::string>();
    r.t_prime = j.at("t_prime").get<std::string>();
    r.r_prime = non_empty(j, "r_prime");
    r.model_id = j.at("model_id").get<std::string>();
    auto strategy = parse_answer_strategy(j.at("strategy").get<std::string>());
    if (!strategy) throw ValidationError("unknown strategy");
    r.strategy = *strategy;
    const auto& rs = j.at("rationales");
    if (!rs.is_array() || rs.size() != kFacets.size()) throw ValidationError("expected exactly three rationales");
    for (std::size_t i = 0; i < rs.size(); ++i) {
      auto facet = parse_facet_id(rs[i].at("facet").get<std::string>());
      if (!facet || *facet != kFacets[i].id) throw ValidationError("rationales out of facet order");
      FacetRationale fr{*facet, rs[i].at("rationale").get<std::string>(), rs[i].at("is_noop").get<bool>()};
      if (fr.is_noop != (fr.rationale == kNoRevisionMarker))
        throw ValidationError("is_noop disagrees with the rationale text");
      r.rationales.push_back(std::move(fr));
    }
    if (!r.t_prime.starts_with(r.t0)) throw ValidationError("t_prime does not start with t0");
    return r;
  });
}

json encode(const ItemFailure& f) {
  json j = {{"query_id", f.id}, {"stage", f.stage}, {"reason", f.reason}};
  if (!f.detail.empty()) j["detail"] = f.detail;
  return tag_schema(std::move(j), schema::kReject);
}

ItemFailure decode_reject(const json& j) {
  require_schema(j, schema::kReject);
  return decoding("reject record", [&] {
    return ItemFailure{non_empty(j, "query_id"), non_empty(j, "stage"), non_empty(j, "reason"),
                       j.value("detail", std::string{})};
  });
}

std::string_view to_string(DatasetStage s) {
  return s == DatasetStage::distillation ? "distillation" : "self_refinement";
}

std::optional<DatasetStage> parse_dataset_stage(std::string_view s) {
  if (s == "distillation") return DatasetStage::distillation;
  if (s == "self_refinement") return DatasetStage::self_refinement;
  return std::nullopt;
}

std::string dataset_record_id(std::string_view query_id, DatasetStage stage) {
  return to_hex(Fnv1a{}.update(query_id).separator().update(to_string(stage)).digest());
}

DatasetRecord make_dataset_record(std::string_view query_text, std::string_view reasoning, std::string_view answer,
                                  DatasetStage stage, Provenance provenance, const ThinkDelimiters& delims) {
  DatasetRecord r;
  r.record_id = dataset_record_id(provenance.query_id, stage);
  r.reasoning = std::string(reasoning);
  r.answer = std::string(answer);
  r.messages = {{MessageRole::user, std::string(query_text)},
                {MessageRole::assistant, delims.open + r.reasoning + delims.close + r.answer}};
  r.stage = stage;
  r.provenance = std::move(provenance);
  return r;
}

DatasetRecord make_dataset_record(const TeacherResponse& t, const ThinkDelimiters& delims) {
  return make_dataset_record(t.query_text, t.thinking, t.answer, DatasetStage::distillation,
                             {t.query_id, {t.teacher_model}, std::nullopt}, delims);
}

DatasetRecord make_dataset_record(const RefinementRecord& r, const ThinkDelimiters& delims) {
  return make_dataset_record(r.query_text, r.t_prime, r.r_prime, DatasetStage::self_refinement,
                             {r.query_id, {r.model_id}, r.strategy}, delims);
}

void validate_dataset_record(const DatasetRecord& r, const ThinkDelimiters& delims) {
  if (r.provenance.query_id.empty()) throw ValidationError("provenance.query_id is empty");
  if (r.record_id != dataset_record_id(r.provenance.query_id, r.stage))
    throw ValidationError("record_id is not the content hash of (query_id, stage)");
  const auto users = std::count_if(r.messages.begin(), r.messages.end(),
                                   [](const Message& m) { return m.role == MessageRole::user; });
  if (users != 1) throw ValidationError("expected exactly one user message");
  if (r.messages.size() != 2 || r.messages[0].role != MessageRole::user ||
      r.messages[1].role != MessageRole::assistant)
    throw ValidationError("messages must be [user, assistant]");
  if (text::trim(r.messages[0].content).empty()) throw ValidationError("user message is empty");
  if (text::trim(r.answer).empty()) throw ValidationError("answer is empty");
  if (r.messages[1].content != delims.open + r.reasoning + delims.close + r.answer)
    throw ValidationError("assistant content does not match reasoning and answer");
  const bool has_strategy = r.provenance.strategy.has_value();
  if ((r.stage == DatasetStage::self_refinement) != has_strategy)
    throw ValidationError("provenance.strategy must be set exactly for self_refinement records");
}

json encode(const DatasetRecord& r) {
  json prov = {{"query_id", r.provenance.query_id}, {"models", r.provenance.models}};
  prov["strategy"] = r.provenance.strategy ? json(to_string(*r.provenance.strategy)) : json(nullptr);
  return tag_schema({{"record_id", r.record_id},
                     {"messages", r.messages},
                     {"reasoning", r.reasoning},
                     {"answer", r.answer},
                     {"stage", to_string(r.stage)},
                     {"provenance", prov}},
                    schema::kSftRecord);
}

DatasetRecord decode_dataset_record(const json& j, const ThinkDelimiters& delims) {
  require_schema(j, schema::kSftRecord);
  auto r = decoding("sft record", [&] {
    DatasetRecord r;
    r.record_id = j.at("record_id").get<std::string>();
    r.messages = j.at("messages").get<std::vector<Message>>();
    r.reasoning = j.at("reasoning").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
    auto stage = parse_dataset_stage(j.at("stage").get<std::string>());
    if (!stage) throw ValidationError("unknown stage");
    r.stage = *stage;
    const auto& p = j.at("provenance");
    r.provenance.query_id = p.at("query_id").get<std::string>();
    r.provenance.models = p.at("models").get<std::vector<std::string>>();
    if (p.contains("strategy") && !p["strategy"].is_null()) {
      auto s = parse_answer_strategy(p["strategy"].get<std::string>());
      if (!s) throw ValidationError("unknown strategy");
      r.provenance.strategy = *s;
    }
    return r;
  });
  validate_dataset_record(r, delims);
  return r;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path, bool append) : path_(path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  out_.open(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!out_) throw IoError("cannot open '" + path.string() + "' for writing");
}

void JsonlWriter::write(const json& j) {
  const auto line = j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  out_ << line;
  out_.flush();
  if (!out_) throw IoError("write to '" + path_.string() + "' failed");
  ++lines_;
  bytes_ += line.size();
}

void for_each_line(const std::filesystem::path& path, const std::function<void(std::size_t, std::string_view)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    fn(n, line);
  }
}

bool repair_jsonl_tail(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return false;
  std::string content;
  {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    content = os.str();
  }
  if (content.empty() || content.back() == '\n') return false;
  const auto last_nl = content.rfind('\n');
  const auto keep = last_nl == std::string::npos ? 0 : last_nl + 1;
  std::filesystem::resize_file(path, keep);
  return true;
}

ExportSummary write_sft(std::vector<DatasetRecord> records, const std::filesystem::path& out_path) {
  std::stable_sort(records.begin(), records.end(),
                   [](const auto& a, const auto& b) { return a.provenance.query_id < b.provenance.query_id; });
  const auto tmp = out_path.string() + ".tmp";
  ExportSummary summary;
  {
    JsonlWriter w(tmp, false);
    for (const auto& r : records) w.write(encode(r));
    summary.written = w.lines();
    summary.bytes = w.bytes();
  }
  std::error_code ec;
  std::filesystem::rename(tmp, out_path, ec);
  if (ec) throw IoError("cannot move export into place at '" + out_path.string() + "': " + ec.message());
  return summary;
}

ExportSummary export_sft(const std::filesystem::path& records_in, const std::filesystem::path& out_path,
                         DatasetStage stage, const ThinkDelimiters& delims) {
  std::vector<DatasetRecord> records;
  std::uint64_t skipped = 0;
  for_each_line(records_in, [&](std::size_t, std::string_view line) {
    try {
      const auto j = json::parse(line);
      auto rec = stage == DatasetStage::distillation ? make_dataset_record(decode_teacher_response(j), delims)
                                                     : make_dataset_record(decode_refinement(j), delims);
      validate_dataset_record(rec, delims);
      records.push_back(std::move(rec));
    } catch (const json::exception&) {
      ++skipped;
    } catch (const ValidationError&) {
      ++skipped;
    }
  });
  if (records.empty()) throw ValidationError("no valid records to export from '" + records_in.string() + "'");
  auto summary = write_sft(std::move(records), out_path);
  summary.skipped = skipped;
  return summary;
}

std::string_view to_string(TrainingStage s) { return s == TrainingStage::kd ? "kd" : "sr"; }

std::optional<TrainingStage> parse_training_stage(std::string_view s) {
  if (s == "kd") return TrainingStage::kd;
  if (s == "sr") return TrainingStage::sr;
  return std::nullopt;
}

TrainingManifest manifest_for(TrainingStage stage, std::string dataset_path) {
  TrainingManifest m;
  m.stage = stage;
  m.dataset_path = std::move(dataset_path);
  if (stage == TrainingStage::kd) {
    m.learning_rate = 4e-5;
    m.batch_size = 32;
    m.epochs = 6;
    m.sequence_index = 1;
    m.init_from = "base";
  } else {
    m.learning_rate = 5e-6;
    m.batch_size = 16;
    m.epochs = 6;
    m.sequence_index = 2;
    m.init_from = "kd";
  }
  return m;
}

json encode(const TrainingManifest& m) {
  return tag_schema({{"stage", to_string(m.stage)},
                     {"learning_rate", m.learning_rate},
                     {"batch_size", m.batch_size},
                     {"epochs", m.epochs},
                     {"optimizer", {{"name", m.optimizer}, {"weight_decay", m.weight_decay}}},
                     {"lr_schedule", {{"name", m.schedule}, {"warmup", m.warmup}, {"warmup_fraction", m.warmup_fraction}}},
                     {"sequence_index", m.sequence_index},
                     {"init_from", m.init_from},
                     {"dataset_path", m.dataset_path}},
                    schema::kTrainingManifest);
}

TrainingManifest decode_manifest(const json& j) {
  require_schema(j, schema::kTrainingManifest);
  return decoding("training manifest", [&] {
    auto stage = parse_training_stage(j.at("stage").get<std::string>());
    if (!stage) throw ValidationError("unknown training stage");
    TrainingManifest m;
    m.stage = *stage;
    m.learning_rate = j.at("learning_rate").get<double>();
    m.batch_size = j.at("batch_size").get<int>();
    m.epochs = j.at("epochs").get<int>();
    m.optimizer = j.at("optimizer").at("name").get<std::string>();
    m.weight_decay = j.at("optimizer").at("weight_decay").get<double>();
    m.schedule = j.at("lr_schedule").at("name").get<std::string>();
    m.warmup = j.at("lr_schedule").at("warmup").get<std::string>();
    m.warmup_fraction = j.at("lr_schedule").at("warmup_fraction").get<double>();
    m.sequence_index = j.at("sequence_index").get<int>();
    m.init_from = j.at("init_from").get<std::string>();
    m.dataset_path = j.at("dataset_path").get<std::string>();
    return m;
  });
}

TrainingManifest emit_manifest(std::string_view stage, const std::string& dataset_path,
                               const std::filesystem::path& out_path) {
  const auto parsed = parse_training_stage(stage);
  if (!parsed) throw ValidationError("unknown training stage '" + std::string(stage) + "' (expected kd or sr)");
  auto m = manifest_for(*parsed, dataset_path);
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + out_path.string() + "'");
  out << encode(m).dump(2) << "\n";
  if (!out) throw IoError("cannot write manifest '" + out_path.string() + "'");
  return m;
}

void validate_record_json(const json& j) {
  if (!j.is_object() || !j.contains("schema") || !j["schema"].is_string())
    throw ValidationError("record has no schema field");
  const auto name = j["schema"].get<std::string>();
  if (name == schema::kQuery) {
    decode_query(j);
  } else if (name == schema::kTeacherResponse) {
    decode_teacher_response(j);
  } else if (name == schema::kRefinement) {
    decode_refinement(j);
  } else if (name == schema::kReject) {
    decode_reject(j);
  } else if (name == schema::kSftRecord) {
    decode_dataset_record(j);
  } else if (name == schema::kRubricReport) {
    decode_rubric_report(j);
  } else if (name == schema::kTrainingManifest) {
    decode_manifest(j);
  } else {
    throw ValidationError("unknown schema '" + name + "'");
  }
}

ValidationReport validate_file(const std::filesystem::path& path) {
  ValidationReport report;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  const auto content = os.str();

  // A manifest is one pretty-printed object rather than one object per line.
  if (auto whole = json::parse(content, nullptr, false);
      !whole.is_discarded() && whole.is_object() && whole.value("schema", "") == schema::kTrainingManifest) {
    report.records = 1;
    try {
      validate_record_json(whole);
      report.valid = 1;
    } catch (const Error& e) {
      report.issues.push_back({1, e.what()});
    }
    return report;
  }

  for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    ++report.records;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      report.issues.push_back({line_no, "not valid JSON"});
      return;
    }
    try {
      validate_record_json(j);
      ++report.valid;
    } catch (const Error& e) {
      report.issues.push_back({line_no, e.what()});
    }
  });
  return report;
}

}  // namespace ctxrefine
