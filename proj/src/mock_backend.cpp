#include <algorithm>
#include <array>
#include <span>
#include <thread>

#include "ctxrefine/backends.hpp"
#include "ctxrefine/hash.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {
namespace {

class SplitMix {
 public:
  explicit SplitMix(std::uint64_t s) : state_(s) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next() % n); }
  template <typename T, std::size_t N>
  const T& pick(const std::array<T, N>& a) {
    return a[below(N)];
  }

 private:
  std::uint64_t state_;
};

constexpr std::array<std::string_view, 8> kQueryShapes = {
    "I was recently told I might have {d}. What should I do next?",
    "My doctor mentioned {d} after my last visit. Is this something serious?",
    "Could the symptoms I've had for {n} days be {d}? I'm not sure where to start.",
    "What are the usual treatment options for {d} for someone who is {a} years old?",
    "My relative, {a} years old, was diagnosed with {d}. How can I help them at home?",
    "Is it safe to keep working while dealing with {d}?",
    "How is {d} usually confirmed, and which tests are needed?",
    "I read online that {d} goes away on its own. Is that true?",
};

constexpr std::array<std::string_view, 5> kQueryOpeners = {
    "I'm {a}.", "Asking for someone aged {a}.", "Quick question, {a} years old here.", "Hi, I am {a} years old.",
    "Some background: age {a}.",
};

constexpr std::array<std::string_view, 12> kAnswerSentences = {
    "The most common causes are usually manageable once they are properly identified.",
    "It would help to know how long the symptoms have lasted and whether they are getting worse.",
    "A clinician can confirm the diagnosis with a short examination and, if needed, basic blood tests.",
    "Most people improve with rest, adequate fluids, and treatment that targets the underlying cause.",
    "Over-the-counter pain relief can be used for comfort if there are no contraindications.",
    "Please keep a simple diary of symptoms, medications, and any triggers you notice.",
    "If you take other medicines regularly, check with a pharmacist about possible interactions.",
    "Seek urgent care if you develop chest pain, difficulty breathing, confusion, or fainting.",
    "Follow-up within one to two weeks is reasonable if things are not clearly improving.",
    "Lifestyle measures such as sleep, balanced meals, and regular activity support recovery.",
    "Local guidelines and insurance coverage can differ, so ask your care team about options nearby.",
    "Do not start or stop prescription medicines without speaking to the prescriber first.",
};

constexpr std::array<std::string_view, 6> kReasoningSentences = {
    "The user is asking about a medical concern and wants practical guidance.",
    "I should consider the most likely explanations first and then the serious ones.",
    "The query leaves out some details, such as age and current medications.",
    "A balanced answer should explain options without overstating certainty.",
    "Red-flag symptoms need to be mentioned so the user knows when to seek care.",
    "The answer should be clear and use plain language.",
};

struct FacetBank {
  std::string_view tag_suffix;
  std::string_view echo;
  std::array<std::string_view, 3> rationales;
};

constexpr std::array<FacetBank, 3> kFacetBanks = {{
    {"decision_making",
     "Decision-making awareness",
     {"We should ask about the patient's current medications to make an accurate diagnosis.",
      "We should ask how long the symptoms have lasted and whether any tests were already done.",
      "We should ask about relevant medical history before recommending a specific treatment."}},
    {"communication",
     "Communication awareness",
     {"The user appears to be a layperson, so medical terms should be replaced with plain language.",
      "The answer should be shorter and lead with the single most important next step.",
      "The user writes informally, so a warmer and more conversational tone would fit better."}},
    {"safety",
     "Safety awareness",
     {"The answer should warn that severe or worsening symptoms require urgent in-person care.",
      "The answer should caution against using unproven remedies in place of established treatment.",
      "The answer should flag that dosing changes must be supervised by a clinician."}},
}};

std::string join_until(SplitMix& rng, std::span<const std::string_view> bank, std::size_t min_words) {
  std::string out;
  std::size_t words = 0;
  std::size_t start = rng.below(bank.size());
  for (std::size_t i = 0; words < min_words; ++i) {
    const auto s = bank[(start + i) % bank.size()];
    if (!out.empty()) out += ' ';
    out += s;
    words += text::count_words(s);
  }
  return out;
}

std::string find_labeled_line(const ChatRequest& req, std::string_view label) {
  for (const auto& m : req.messages) {
    for (const auto& line : text::split_lines(m.content)) {
      auto t = text::trim(line);
      if (!t.empty() && t.front() == '-') t = text::trim(t.substr(1));
      if (text::starts_with_ci(t, label)) return std::string(text::trim(t.substr(label.size())));
    }
  }
  return {};
}

}  // namespace

MockBackend::MockBackend(MockOptions options) : options_(std::move(options)) {}

std::uint64_t MockBackend::request_key(const ChatRequest& req, std::uint64_t seed) {
  Fnv1a h;
  h.update(seed).separator();
  for (const auto& m : req.messages) h.update(to_string(m.role)).separator().update(m.content).separator();
  h.update(nlohmann::json(req.sampling).dump());
  return h.digest();
}

std::string MockBackend::reply(const ChatRequest& req, std::uint64_t key) const {
  SplitMix rng(key);
  const std::string_view tag = req.request_tag;
  const auto& last_user = req.messages.back().content;

  if (tag == tags::kGenQueries) {
    auto disease = find_labeled_line(req, "Disease:");
    if (const auto paren = disease.rfind(" ("); paren != std::string::npos) disease.resize(paren);
    if (disease.empty()) disease = "this condition";
    auto intent = find_labeled_line(req, "Intent:");
    if (const auto paren = intent.find(" ("); paren != std::string::npos) intent.resize(paren);
    std::string q = std::string(rng.pick(kQueryOpeners)) + " " + std::string(rng.pick(kQueryShapes));
    if (q.find("{n}") == std::string::npos) q += " This started about {n} days ago.";
    if (!intent.empty()) q += " Mostly I want help with " + intent + ".";
    q = text::replace_all(q, "{d}", disease);
    q = text::replace_all(q, "{n}", std::to_string(2 + rng.below(28)));
    q = text::replace_all(q, "{a}", std::to_string(18 + rng.below(70)));
    if (rng.below(2) == 0) return "<query>\n" + q + "\n</query>";
    return "Here is the query:\n<query>" + q + "</query>";
  }

  if (tag == tags::kDistill || tag == tags::kRefineGen || tag == tags::kScoreGenerate) {
    const std::size_t target = 35 + rng.below(126);
    std::string answer = join_until(rng, kAnswerSentences, target);
    if (tag == tags::kScoreGenerate) return answer;
    const bool omit = std::any_of(options_.omit_think_when_contains.begin(), options_.omit_think_when_contains.end(),
                                  [&](const std::string& s) { return last_user.find(s) != std::string::npos; });
    if (omit) return answer;
    std::string reasoning = join_until(rng, kReasoningSentences, 20 + rng.below(40));
    return options_.think_open + reasoning + options_.think_close + "\n\n" + answer;
  }

  if (tag.starts_with(tags::kRefineEvalPrefix)) {
    const auto facet = tag.substr(tags::kRefineEvalPrefix.size());
    for (const auto& bank : kFacetBanks) {
      if (bank.tag_suffix != facet) continue;
      if (rng.below(4) == 0) return "NO_REVISION";
      return std::string(bank.echo) + ": " + std::string(rng.pick(bank.rationales));
    }
    return "NO_REVISION";
  }

  if (tag == tags::kRefineDirect || tag == tags::kRefineContinue) {
    std::string lead = tag == tags::kRefineDirect ? "Thanks for sharing this. " : "Based on the reasoning above, ";
    return lead + join_until(rng, kAnswerSentences, 60 + rng.below(100));
  }

  if (tag == tags::kScoreJudge) {
    if (rng.below(10) < 6) return "MET\nThe response satisfies the criterion.";
    return "UNMET\nThe response does not address the criterion.";
  }

  return "Mock reply " + to_hex(key);
}

ChatResponse MockBackend::send(const ChatRequest& req) {
  const auto now = ++in_flight_;
  auto prev = max_in_flight_.load();
  while (now > prev && !max_in_flight_.compare_exchange_weak(prev, now)) {
  }
  ++calls_;
  if (options_.latency.count() > 0) std::this_thread::sleep_for(options_.latency);

  ChatResponse out;
  out.content = reply(req, request_key(req, options_.seed));
  for (const auto& m : req.messages) out.prompt_tokens += text::count_words(m.content);
  out.completion_tokens = text::count_words(out.content);
  out.backend_id = id();
  --in_flight_;
  return out;
}

}  // namespace ctxrefine
