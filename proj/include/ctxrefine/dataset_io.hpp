#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxrefine/common.hpp"
#include "ctxrefine/distillation.hpp"
#include "ctxrefine/gateway.hpp"
#include "ctxrefine/query_synth.hpp"
#include "ctxrefine/refinement.hpp"
#include "json.hpp"

namespace ctxrefine {

inline constexpr int kSchemaVersion = 1;

// Value of the `schema` field on every emitted line.
namespace schema {
inline constexpr std::string_view kQuery = "query";
inline constexpr std::string_view kTeacherResponse = "teacher_response";
inline constexpr std::string_view kRefinement = "refinement";
inline constexpr std::string_view kReject = "reject";
inline constexpr std::string_view kSftRecord = "sft_record";
inline constexpr std::string_view kRubricReport = "rubric_report";
inline constexpr std::string_view kTrainingManifest = "training_manifest";
}  // namespace schema

// Adds `schema` and `schema_version` to an object.
nlohmann::json tag_schema(nlohmann::json j, std::string_view schema_name);
// Throws ValidationError unless the object carries this schema at the
// current version.
void require_schema(const nlohmann::json& j, std::string_view schema_name);

nlohmann::json encode(const SynthQuery& q);
nlohmann::json encode(const TeacherResponse& t);
nlohmann::json encode(const RefinementRecord& r);
nlohmann::json encode(const ItemFailure& f);

SynthQuery decode_query(const nlohmann::json& j);
TeacherResponse decode_teacher_response(const nlohmann::json& j);
RefinementRecord decode_refinement(const nlohmann::json& j);
ItemFailure decode_reject(const nlohmann::json& j);

enum class DatasetStage { distillation, self_refinement };

std::string_view to_string(DatasetStage s);
std::optional<DatasetStage> parse_dataset_stage(std::string_view s);

struct Provenance {
  std::string query_id;
  std::vector<std::string> models;
  std::optional<AnswerStrategy> strategy;  // self_refinement only

  bool operator==(const Provenance&) const = default;
};

// One chat-format training example: a user turn holding the query and an
// assistant turn holding `<think>reasoning</think>answer`. Reasoning and
// answer are also stored separately.
struct DatasetRecord {
  std::string record_id;
  std::vector<Message> messages;
  std::string reasoning;
  std::string answer;
  DatasetStage stage = DatasetStage::distillation;
  Provenance provenance;

  bool operator==(const DatasetRecord&) const = default;
};

// Content hash of (query_id, stage).
std::string dataset_record_id(std::string_view query_id, DatasetStage stage);

DatasetRecord make_dataset_record(std::string_view query_text, std::string_view reasoning, std::string_view answer,
                                  DatasetStage stage, Provenance provenance, const ThinkDelimiters& delims = {});
DatasetRecord make_dataset_record(const TeacherResponse& t, const ThinkDelimiters& delims = {});
DatasetRecord make_dataset_record(const RefinementRecord& r, const ThinkDelimiters& delims = {});

// Throws ValidationError when a record breaks its invariants.
void validate_dataset_record(const DatasetRecord& r, const ThinkDelimiters& delims = {});

nlohmann::json encode(const DatasetRecord& r);
// Parses and validates.
DatasetRecord decode_dataset_record(const nlohmann::json& j, const ThinkDelimiters& delims = {});

// Append-or-truncate line writer. Each line is flushed as written so an
// interrupted run leaves at most one partial trailing line.
class JsonlWriter {
 public:
  JsonlWriter(const std::filesystem::path& path, bool append);
  void write(const nlohmann::json& j);
  std::uint64_t lines() const noexcept { return lines_; }
  std::uint64_t bytes() const noexcept { return bytes_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::uint64_t lines_ = 0;
  std::uint64_t bytes_ = 0;
};

// Calls fn(line_number, line) for every non-empty line.
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, std::string_view)>& fn);

// Drops an unterminated final line left by an interrupted writer. Returns
// true if the file was modified.
bool repair_jsonl_tail(const std::filesystem::path& path);

struct ExportSummary {
  std::uint64_t written = 0;
  std::uint64_t skipped = 0;
  std::uint64_t bytes = 0;
};

// Writes records sorted by query id, one chat-format object per line.
ExportSummary write_sft(std::vector<DatasetRecord> records, const std::filesystem::path& out_path);

// Converts a stage output file (teacher responses for distillation,
// refinement records for self_refinement) into an SFT file. Lines that fail
// to parse or validate are skipped and counted. Throws ValidationError if no
// line is usable and IoError if the output cannot be written.
ExportSummary export_sft(const std::filesystem::path& records_in, const std::filesystem::path& out_path,
                         DatasetStage stage, const ThinkDelimiters& delims = {});

enum class TrainingStage { kd, sr };

std::string_view to_string(TrainingStage s);
std::optional<TrainingStage> parse_training_stage(std::string_view s);

// Fixed fine-tuning hyperparameters for an external trainer. The two stages
// run in sequence: kd first, then sr starting from the kd checkpoint.
struct TrainingManifest {
  TrainingStage stage = TrainingStage::kd;
  double learning_rate = 0.0;
  int batch_size = 0;
  int epochs = 0;
  std::string optimizer = "adamw";
  double weight_decay = 0.01;
  std::string schedule = "cosine";
  std::string warmup = "linear";
  double warmup_fraction = 0.10;
  int sequence_index = 1;
  std::string init_from;
  std::string dataset_path;

  bool operator==(const TrainingManifest&) const = default;
};

TrainingManifest manifest_for(TrainingStage stage, std::string dataset_path);
nlohmann::json encode(const TrainingManifest& m);
TrainingManifest decode_manifest(const nlohmann::json& j);

// Throws ValidationError for a stage other than "kd" or "sr".
TrainingManifest emit_manifest(std::string_view stage, const std::string& dataset_path,
                               const std::filesystem::path& out_path);

struct ValidationIssue {
  std::size_t line = 0;
  std::string message;
};

struct ValidationReport {
  std::size_t records = 0;
  std::size_t valid = 0;
  std::vector<ValidationIssue> issues;
  bool ok() const noexcept { return issues.empty() && records > 0; }
};

// Checks one parsed object against the schema named in its `schema` field.
void validate_record_json(const nlohmann::json& j);

// Validates a line-delimited artifact, or a single-object manifest file.
ValidationReport validate_file(const std::filesystem::path& path);

}  // namespace ctxrefine
