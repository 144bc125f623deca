#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ctxrefine {

enum class UserRole { patient, caregiver, doctor };
enum class Locality { urban, rural };
enum class IntentVagueness { vague, clear };
enum class InfoCompleteness { complete, incomplete };
enum class LanguageStyle { formal, informal };

std::string_view to_string(UserRole v);
std::string_view to_string(Locality v);
std::string_view to_string(IntentVagueness v);
std::string_view to_string(InfoCompleteness v);
std::string_view to_string(LanguageStyle v);

std::optional<UserRole> parse_user_role(std::string_view s);
std::optional<Locality> parse_locality(std::string_view s);
std::optional<IntentVagueness> parse_intent_vagueness(std::string_view s);
std::optional<InfoCompleteness> parse_info_completeness(std::string_view s);
std::optional<LanguageStyle> parse_language_style(std::string_view s);

// Attribute names as they appear in configs, reports and prompt slots.
namespace attr {
inline constexpr std::string_view kRole = "role";
inline constexpr std::string_view kCountry = "country";
inline constexpr std::string_view kLocality = "locality";
inline constexpr std::string_view kDisease = "disease";
inline constexpr std::string_view kIntent = "intent";
inline constexpr std::string_view kIntentVagueness = "intent_vagueness";
inline constexpr std::string_view kInfoCompleteness = "info_completeness";
inline constexpr std::string_view kLanguageStyle = "language_style";
}  // namespace attr

// Country label meaning "draw a concrete country uniformly from the catalog".
inline constexpr std::string_view kOtherCountry = "other";

enum class PriorSource { inline_support, catalog_ref };

struct Outcome {
  std::string label;
  double probability = 0.0;

  bool operator==(const Outcome&) const = default;
};

// A categorical prior over one attribute. Catalog-backed priors (disease,
// intent) carry no explicit support: they are uniform over the catalog.
struct AttributePrior {
  std::string name;
  std::vector<Outcome> support;
  PriorSource source = PriorSource::inline_support;

  bool operator==(const AttributePrior&) const = default;
};

// Throws ValidationError naming the attribute when the support is empty,
// has duplicate labels, a probability outside [0,1], or does not sum to 1
// within 1e-9.
void validate_prior(const AttributePrior& prior);

std::vector<AttributePrior> default_priors();

// Replaces the support of each named prior; unknown names are rejected.
std::vector<AttributePrior> apply_prior_overrides(std::vector<AttributePrior> priors,
                                                  const nlohmann::json& overrides);

struct IcdEntry {
  std::string code;
  std::string name;

  bool operator==(const IcdEntry&) const = default;
};

struct IcdCatalog {
  std::vector<IcdEntry> entries;
  std::size_t removed_count = 0;  // rows dropped by the category filter
};

// True for codes whose category letter is A..T.
bool icd_category_retained(std::string_view code);

// Reads `code<TAB>name` rows. Blank lines and lines starting with '#' are
// ignored. Codes in categories U..Z are dropped.
IcdCatalog load_icd_catalog(const std::filesystem::path& path);
IcdCatalog parse_icd_catalog(std::string_view content);

struct Intent {
  std::string label;
  std::string description;
  std::string example;

  bool operator==(const Intent&) const = default;
};

inline constexpr std::size_t kPatientCaregiverIntentCount = 14;
inline constexpr std::size_t kDoctorIntentCount = 17;

struct IntentCatalog {
  std::vector<Intent> patient_caregiver_intents;
  std::vector<Intent> doctor_intents;

  const std::vector<Intent>& for_role(UserRole role) const {
    return role == UserRole::doctor ? doctor_intents : patient_caregiver_intents;
  }
};

IntentCatalog load_intent_catalog(const std::filesystem::path& path);
IntentCatalog parse_intent_catalog(const nlohmann::json& doc);

// One country name per line; '#' comments and blanks are skipped.
std::vector<std::string> load_country_list(const std::filesystem::path& path);

struct Catalogs {
  IcdCatalog icd;
  IntentCatalog intents;
  std::vector<std::string> countries;
};

// Loads the catalogs shipped in the repository's data directory.
Catalogs load_bundled_catalogs();
std::filesystem::path bundled_data_dir();

struct Disease {
  std::string icd_code;
  std::string name;

  bool operator==(const Disease&) const = default;
};

struct IntentRef {
  std::string category;
  std::string description;

  bool operator==(const IntentRef&) const = default;
};

// One sampled user context. Country and locality together form the region.
struct AttributeSet {
  UserRole role = UserRole::patient;
  std::string country;
  Locality locality = Locality::urban;
  Disease disease;
  IntentRef intent;
  IntentVagueness intent_vagueness = IntentVagueness::clear;
  InfoCompleteness info_completeness = InfoCompleteness::incomplete;
  LanguageStyle language_style = LanguageStyle::formal;
  std::uint64_t seed_index = 0;

  bool operator==(const AttributeSet&) const = default;
};

void to_json(nlohmann::json& j, const AttributeSet& a);
void from_json(const nlohmann::json& j, AttributeSet& a);

// Draws `n` attribute sets from one seeded stream. The i-th set depends only
// on (priors, catalogs, seed, i), so shorter runs are prefixes of longer ones.
std::vector<AttributeSet> sample_attribute_sets(std::span<const AttributePrior> priors,
                                                const Catalogs& catalogs, std::size_t n,
                                                std::uint64_t seed);

}  // namespace ctxrefine
