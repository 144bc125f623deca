#include <fstream>
#include <random>
#include <sstream>

#include "ctxrefine/dataset_io.hpp"
#include "ctxrefine/errors.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace ctxrefine;
using nlohmann::json;

namespace {

std::string random_text(std::mt19937_64& rng, std::size_t max_len) {
  static const std::vector<std::string> pieces{"a", "b", "z", " ", "\n", "\t", "\"", "\\", "{", "}", "<", ">",
                                               "é", "ü", "中", "文", "😀", "0", "9", "/", ",", "'"};
  std::string s = "x";
  const std::size_t len = rng() % max_len;
  for (std::size_t i = 0; i < len; ++i) s += pieces[rng() % pieces.size()];
  return s;
}

DatasetRecord random_record(std::mt19937_64& rng, std::size_t i) {
  const auto stage = rng() % 2 ? DatasetStage::distillation : DatasetStage::self_refinement;
  Provenance p;
  p.query_id = "q" + std::to_string(i);
  p.models = {random_text(rng, 8)};
  if (rng() % 3 == 0) p.models.push_back(random_text(rng, 8));
  if (stage == DatasetStage::self_refinement)
    p.strategy = rng() % 2 ? AnswerStrategy::direct_refine : AnswerStrategy::continual_gen;
  const auto reasoning = rng() % 10 == 0 ? std::string() : random_text(rng, 200);
  return make_dataset_record(random_text(rng, 80), reasoning, random_text(rng, 300), stage, p);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RefinementRecord sample_refinement() {
  RefinementRecord r;
  r.query_id = "q0000007";
  r.query_text = "Can I take ibuprofen with my blood pressure pills?";
  r.t0 = "The user asks about an interaction.";
  r.r0 = "Usually it is fine for short periods.";
  r.rationales = {{FacetId::decision_making, "We should ask which blood pressure medicine.", false},
                  {FacetId::communication, std::string(kNoRevisionMarker), true},
                  {FacetId::safety, "Warn that NSAIDs can raise blood pressure.", false}};
  r.t_prime = splice_reasoning(r.t0, r.rationales);
  r.r_prime = "It depends on the medicine you take. NSAIDs can raise blood pressure.";
  r.strategy = AnswerStrategy::continual_gen;
  r.model_id = "student";
  return r;
}

TeacherResponse sample_teacher(std::string id) {
  TeacherResponse t;
  t.query_id = std::move(id);
  t.query_text = "What helps a sore throat?";
  t.thinking = "Consider viral causes.";
  t.answer = "Warm fluids and rest usually help.";
  t.word_count_answer = 6;
  t.teacher_model = "teacher";
  return t;
}

}  // namespace

TEST_CASE("refinement records become <think>t'</think>r' assistant turns") {
  const auto r = sample_refinement();
  const auto rec = make_dataset_record(r);
  REQUIRE(rec.messages.size() == 2);
  CHECK(rec.messages[0].role == MessageRole::user);
  CHECK(rec.messages[0].content == r.query_text);
  CHECK(rec.messages[1].content == "<think>" + r.t_prime + "</think>" + r.r_prime);
  CHECK(rec.stage == DatasetStage::self_refinement);
  CHECK(rec.provenance.strategy == AnswerStrategy::continual_gen);
  CHECK(rec.record_id == dataset_record_id(r.query_id, DatasetStage::self_refinement));
  CHECK(rec.record_id != dataset_record_id(r.query_id, DatasetStage::distillation));
  CHECK_NOTHROW(validate_dataset_record(rec));
}

TEST_CASE("records breaking invariants are refused") {
  auto rec = make_dataset_record(sample_refinement());
  auto bad = rec;
  bad.messages.push_back({MessageRole::user, "again"});
  CHECK_THROWS_AS(validate_dataset_record(bad), ValidationError);
  bad = rec;
  bad.answer = "";
  CHECK_THROWS_AS(validate_dataset_record(bad), ValidationError);
  bad = rec;
  bad.provenance.strategy.reset();
  CHECK_THROWS_AS(validate_dataset_record(bad), ValidationError);
  bad = rec;
  bad.record_id = "0000";
  CHECK_THROWS_AS(validate_dataset_record(bad), ValidationError);

  auto j = encode(rec);
  j["schema_version"] = 2;
  CHECK_THROWS_AS(decode_dataset_record(j), ValidationError);
  j = encode(rec);
  j.erase("messages");
  CHECK_THROWS_AS(decode_dataset_record(j), ValidationError);
}

TEST_CASE("stage records round-trip") {
  const auto r = sample_refinement();
  CHECK(decode_refinement(json::parse(encode(r).dump())) == r);
  const auto t = sample_teacher("q1");
  CHECK(decode_teacher_response(json::parse(encode(t).dump())) == t);
  const ItemFailure f{"q2", "distill", "too_short", "12 words"};
  CHECK(decode_reject(json::parse(encode(f).dump())) == f);

  auto broken = encode(r);
  broken["t_prime"] = "something else";
  CHECK_THROWS_AS(decode_refinement(broken), ValidationError);
}

TEST_CASE("parse(export(x)) equals x over 10000 random records") {
  std::mt19937_64 rng(99);
  testing::TempDir dir("roundtrip");
  std::vector<DatasetRecord> records;
  for (std::size_t i = 0; i < 10000; ++i) records.push_back(random_record(rng, i));
  std::shuffle(records.begin(), records.end(), rng);
  const auto summary = write_sft(records, dir / "out.jsonl");
  CHECK(summary.written == 10000);

  std::map<std::string, DatasetRecord> by_id;
  for (const auto& r : records) by_id.emplace(r.provenance.query_id + to_string(r.stage).data(), r);
  std::size_t n = 0;
  std::string previous;
  for_each_line(dir / "out.jsonl", [&](std::size_t, std::string_view line) {
    const auto back = decode_dataset_record(json::parse(line));
    const auto it = by_id.find(back.provenance.query_id + to_string(back.stage).data());
    REQUIRE(it != by_id.end());
    CHECK(back == it->second);
    CHECK(previous <= back.provenance.query_id);
    previous = back.provenance.query_id;
    ++n;
  });
  CHECK(n == 10000);
}

TEST_CASE("export counts 3 valid lines and 1 malformed line") {
  testing::TempDir dir("export");
  {
    std::ofstream out(dir / "distill.jsonl");
    out << encode(sample_teacher("q3")).dump() << "\n";
    out << encode(sample_teacher("q1")).dump() << "\n";
    out << "{\"schema\": \"teacher_response\", broken\n";
    out << encode(sample_teacher("q2")).dump() << "\n";
  }
  const auto s = export_sft(dir / "distill.jsonl", dir / "sft.jsonl", DatasetStage::distillation);
  CHECK(s.written == 3);
  CHECK(s.skipped == 1);
  CHECK(s.bytes == slurp(dir / "sft.jsonl").size());
  std::vector<std::string> ids;
  for_each_line(dir / "sft.jsonl", [&](std::size_t, std::string_view line) {
    ids.push_back(decode_dataset_record(json::parse(line)).provenance.query_id);
  });
  CHECK(ids == std::vector<std::string>{"q1", "q2", "q3"});
}

TEST_CASE("exporting a file with no usable records fails") {
  testing::TempDir dir("export-empty");
  std::ofstream(dir / "bad.jsonl") << "nope\n";
  CHECK_THROWS_AS(export_sft(dir / "bad.jsonl", dir / "sft.jsonl", DatasetStage::distillation), ValidationError);
}

TEST_CASE("manifests carry the fixed fine-tuning hyperparameters") {
  const auto kd = manifest_for(TrainingStage::kd, "sft_kd.jsonl");
  CHECK(kd.learning_rate == 4e-5);
  CHECK(kd.batch_size == 32);
  CHECK(kd.epochs == 6);
  CHECK(kd.sequence_index == 1);
  const auto sr = manifest_for(TrainingStage::sr, "sft_sr.jsonl");
  CHECK(sr.learning_rate == 5e-6);
  CHECK(sr.batch_size == 16);
  CHECK(sr.epochs == 6);
  CHECK(sr.sequence_index == 2);
  CHECK(sr.init_from == "kd");
  for (const auto& m : {kd, sr}) {
    CHECK(m.optimizer == "adamw");
    CHECK(m.weight_decay == 0.01);
    CHECK(m.schedule == "cosine");
    CHECK(m.warmup == "linear");
    CHECK(m.warmup_fraction == 0.10);
    CHECK(decode_manifest(json::parse(encode(m).dump())) == m);
  }
}

TEST_CASE("emit_manifest writes a validated file and rejects unknown stages") {
  testing::TempDir dir("manifest");
  const auto m = emit_manifest("sr", "sft_sr.jsonl", dir / "manifest_sr.json");
  CHECK(decode_manifest(json::parse(slurp(dir / "manifest_sr.json"))) == m);
  CHECK(validate_file(dir / "manifest_sr.json").ok());
  CHECK_THROWS_AS(emit_manifest("dpo", "x", dir / "m.json"), ValidationError);
}

TEST_CASE("validate_file reports bad lines") {
  testing::TempDir dir("validate");
  {
    std::ofstream out(dir / "mixed.jsonl");
    out << encode(make_dataset_record(sample_refinement())).dump() << "\n";
    out << "not json\n";
    out << json{{"schema", "mystery"}, {"schema_version", 1}}.dump() << "\n";
    out << encode(sample_teacher("q9")).dump() << "\n";
  }
  const auto report = validate_file(dir / "mixed.jsonl");
  CHECK(report.records == 4);
  CHECK(report.valid == 2);
  REQUIRE(report.issues.size() == 2);
  CHECK(report.issues[0].line == 2);
  CHECK(report.issues[1].line == 3);
  CHECK_FALSE(report.ok());
}

TEST_CASE("a partial trailing line is dropped on repair") {
  testing::TempDir dir("repair");
  const auto p = dir / "x.jsonl";
  {
    JsonlWriter w(p, false);
    w.write(json{{"a", 1}});
    w.write(json{{"a", 2}});
  }
  CHECK_FALSE(repair_jsonl_tail(p));
  std::ofstream(p, std::ios::app) << "{\"a\": 3, \"trunc";
  CHECK(repair_jsonl_tail(p));
  CHECK(slurp(p) == "{\"a\":1}\n{\"a\":2}\n");
  {
    JsonlWriter w(p, true);
    w.write(json{{"a", 3}});
  }
  CHECK(slurp(p) == "{\"a\":1}\n{\"a\":2}\n{\"a\":3}\n");
}
