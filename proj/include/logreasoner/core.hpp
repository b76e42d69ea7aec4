#pragma once
// Domain model shared by every pipeline stage: tasks, canonical labels,
// analysis cases, thought templates, trajectories and preference pairs.

#include <array>
#include <map>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "logreasoner/util.hpp"

namespace logreasoner {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A pipeline bug: emitted data would violate a dataset invariant.
struct InvariantViolation : std::runtime_error {
    explicit InvariantViolation(const std::string& what) : std::runtime_error(what) {}
};

enum class TaskKind {
    AnomalyDetection,
    LogSemanticMatching,
    PotentialFailurePrediction,
    RootCauseAnalysis,
};

inline constexpr std::array<TaskKind, 4> kAllTasks = {
    TaskKind::AnomalyDetection,
    TaskKind::LogSemanticMatching,
    TaskKind::PotentialFailurePrediction,
    TaskKind::RootCauseAnalysis,
};

inline std::string task_name(TaskKind task) {
    switch (task) {
        case TaskKind::AnomalyDetection: return "anomaly_detection";
        case TaskKind::LogSemanticMatching: return "log_semantic_matching";
        case TaskKind::PotentialFailurePrediction: return "potential_failure_prediction";
        case TaskKind::RootCauseAnalysis: return "root_cause_analysis";
    }
    throw std::logic_error("unknown task kind");
}

inline std::string task_display_name(TaskKind task) {
    switch (task) {
        case TaskKind::AnomalyDetection: return "Anomaly Detection";
        case TaskKind::LogSemanticMatching: return "Log Semantic Matching";
        case TaskKind::PotentialFailurePrediction: return "Potential Failure Prediction";
        case TaskKind::RootCauseAnalysis: return "Root Cause Analysis";
    }
    throw std::logic_error("unknown task kind");
}

inline std::optional<TaskKind> task_from_name(std::string_view name) {
    for (TaskKind t : kAllTasks)
        if (task_name(t) == name) return t;
    return std::nullopt;
}

struct Label {
    TaskKind task;
    std::string value;

    bool operator==(const Label&) const = default;
};

// Canonical answer vocabulary plus the synonym fold, per task. Binary task
// vocabularies are fixed; RCA categories come from run configuration.
class TaskCatalog {
  public:
    static TaskCatalog defaults() {
        TaskCatalog cat;
        cat.vocab_[TaskKind::AnomalyDetection] = {
            {"normal", "abnormal"},
            "abnormal",
            {{"normal", "normal"},
             {"benign", "normal"},
             {"not abnormal", "normal"},
             {"abnormal", "abnormal"},
             {"anomalous", "abnormal"},
             {"anomaly", "abnormal"},
             {"abnormality", "abnormal"}},
        };
        cat.vocab_[TaskKind::LogSemanticMatching] = {
            {"match", "mismatch"},
            "match",
            {{"match", "match"},
             {"matched", "match"},
             {"matches", "match"},
             {"yes", "match"},
             {"consistent", "match"},
             {"mismatch", "mismatch"},
             {"mismatched", "mismatch"},
             {"no", "mismatch"},
             {"inconsistent", "mismatch"}},
        };
        cat.vocab_[TaskKind::PotentialFailurePrediction] = {
            {"failure", "notification"},
            "failure",
            {{"failure", "failure"},
             {"fault", "failure"},
             {"failure-indicative", "failure"},
             {"notification", "notification"},
             {"notice", "notification"},
             {"informational", "notification"}},
        };
        // RCA stays unconfigured until set_rca_categories() supplies the five names.
        cat.vocab_[TaskKind::RootCauseAnalysis] = {{}, "", {}};
        return cat;
    }

    void set_rca_categories(const std::vector<std::string>& names) {
        if (names.size() != 5)
            throw ConfigError("root_cause_analysis requires exactly 5 category names, got " +
                              std::to_string(names.size()));
        Vocab v;
        for (const std::string& raw : names) {
            std::string c = clean_answer_token(raw);
            if (c.empty()) throw ConfigError("empty RCA category name");
            if (v.fold.count(c)) throw ConfigError("duplicate RCA category: " + c);
            v.values.push_back(c);
            v.fold[c] = c;
        }
        v.positive = v.values.front();
        vocab_[TaskKind::RootCauseAnalysis] = std::move(v);
    }

    void add_synonyms(TaskKind task, const std::map<std::string, std::vector<std::string>>& extra) {
        Vocab& v = vocab_.at(task);
        for (const auto& [canonical, synonyms] : extra) {
            std::string c = clean_answer_token(canonical);
            bool known = false;
            for (const std::string& val : v.values) known = known || val == c;
            if (!known) throw ConfigError("synonyms reference unknown label '" + c + "' for " + task_name(task));
            for (const std::string& syn : synonyms) {
                std::string s = clean_answer_token(syn);
                if (s.empty()) throw ConfigError("empty synonym for " + c);
                auto it = v.fold.find(s);
                if (it != v.fold.end() && it->second != c)
                    throw ConfigError("synonym '" + s + "' already folds to '" + it->second + "'");
                v.fold[s] = c;
            }
        }
    }

    bool configured(TaskKind task) const { return !vocab_.at(task).values.empty(); }

    const std::vector<std::string>& values(TaskKind task) const {
        const Vocab& v = vocab_.at(task);
        if (v.values.empty())
            throw ConfigError("task " + task_name(task) + " has no configured label set");
        return v.values;
    }

    // Designated positive class for P/R/F1 counting: abnormal (AD), match (LSM),
    // failure (PFP); for RCA the first configured category.
    const std::string& positive_value(TaskKind task) const {
        values(task);  // configured check
        return vocab_.at(task).positive;
    }

    std::optional<Label> canonicalize(TaskKind task, std::string_view raw) const {
        values(task);
        std::string token = clean_answer_token(raw);
        if (token.empty()) return std::nullopt;
        const auto& fold = vocab_.at(task).fold;
        auto it = fold.find(token);
        if (it == fold.end()) return std::nullopt;
        return Label{task, it->second};
    }

    bool is_valid(const Label& label) const {
        for (const std::string& v : values(label.task))
            if (v == label.value) return true;
        return false;
    }

    const std::map<std::string, std::string>& fold_table(TaskKind task) const {
        return vocab_.at(task).fold;
    }

  private:
    struct Vocab {
        std::vector<std::string> values;
        std::string positive;
        std::map<std::string, std::string> fold;  // synonym -> canonical
    };
    std::map<TaskKind, Vocab> vocab_;
};

// NoMatch is represented as an empty optional; it never equals gold.
inline std::optional<Label> canonicalize_label(const TaskCatalog& catalog, TaskKind task,
                                               std::string_view raw) {
    return catalog.canonicalize(task, raw);
}

inline bool match_answer(const std::optional<Label>& predicted, const Label& gold) {
    return predicted.has_value() && *predicted == gold;
}

struct LogRecord {
    std::string raw_line;
    std::string source;
    std::size_t seq_index = 0;
    std::optional<Label> gold_label;
};

struct TaskInstance {
    std::string id;
    TaskKind task;
    std::string input_payload;
    Label gold;
    std::string source;
};

enum class CaseOrigin { Handbook, TaskRationale };

inline std::string case_origin_name(CaseOrigin o) {
    return o == CaseOrigin::Handbook ? "handbook" : "task_rationale";
}

inline std::optional<CaseOrigin> case_origin_from_name(std::string_view s) {
    if (s == "handbook") return CaseOrigin::Handbook;
    if (s == "task_rationale") return CaseOrigin::TaskRationale;
    return std::nullopt;
}

// A log-analysis problem paired with its raw analytical process: either a
// handbook flowchart explanation or a verified chain-of-thought rationale.
struct AnalysisCase {
    std::string problem;
    std::string raw_analysis;
    CaseOrigin origin = CaseOrigin::Handbook;
    std::optional<Label> gold;
    std::string source;
};

enum class ReviewStatus { Pending, Approved, Edited, Rejected };

inline std::string review_status_name(ReviewStatus s) {
    switch (s) {
        case ReviewStatus::Pending: return "pending";
        case ReviewStatus::Approved: return "approved";
        case ReviewStatus::Edited: return "edited";
        case ReviewStatus::Rejected: return "rejected";
    }
    throw std::logic_error("unknown review status");
}

inline std::optional<ReviewStatus> review_status_from_name(std::string_view s) {
    if (s == "pending") return ReviewStatus::Pending;
    if (s == "approved") return ReviewStatus::Approved;
    if (s == "edited") return ReviewStatus::Edited;
    if (s == "rejected") return ReviewStatus::Rejected;
    return std::nullopt;
}

// Distilled high-level thought: problem overview, core challenge and ordered
// abstract steps. Steps must stay free of instance-specific values; that is
// a review responsibility, not machine-checked.
struct ThoughtTemplate {
    std::string id;
    std::string problem;
    std::string overview;
    std::string challenge;
    std::vector<std::string> steps;
    ReviewStatus review = ReviewStatus::Pending;
};

// One think-then-answer generation, parsed into ordered steps and an answer.
struct Trajectory {
    std::vector<std::string> steps;
    std::optional<Label> answer;
    std::string raw;
    bool parse_ok = false;
};

// first_error_index is the paper's k (1-based): the first flawed step. Steps
// 1..k-1 of the corrected trajectory are preserved verbatim from the rejected one.
struct CorrectionResult {
    std::size_t first_error_index = 0;
    std::string reflection;
    Trajectory corrected;
};

struct PreferencePair {
    TaskInstance instance;
    Trajectory chosen;
    Trajectory rejected;
};

inline PreferencePair make_preference_pair(TaskInstance instance, Trajectory chosen,
                                           Trajectory rejected) {
    if (!chosen.parse_ok || !match_answer(chosen.answer, instance.gold))
        throw InvariantViolation("preference pair: chosen answer does not match gold for instance " +
                                 instance.id);
    if (rejected.parse_ok && match_answer(rejected.answer, instance.gold))
        throw InvariantViolation("preference pair: rejected trajectory answers gold for instance " +
                                 instance.id);
    return PreferencePair{std::move(instance), std::move(chosen), std::move(rejected)};
}

enum class Role { Teacher, Student, Embedder };

inline std::string role_name(Role r) {
    switch (r) {
        case Role::Teacher: return "teacher";
        case Role::Student: return "student";
        case Role::Embedder: return "embedder";
    }
    throw std::logic_error("unknown role");
}

struct ModelRole {
    Role role;
    std::string endpoint_id;
};

// Splits solution text on "Step N:" markers; when no markers are present,
// falls back to one step per non-empty line. Marker text is stripped.
inline std::vector<std::string> split_solution_steps(const std::string& text) {
    static const std::regex marker(R"(step\s*\d+\s*[:.)])", std::regex::icase);
    std::vector<std::string> steps;
    auto begin = std::sregex_iterator(text.begin(), text.end(), marker);
    auto end = std::sregex_iterator();
    if (begin == end) {
        for (const std::string& line : split_lines(text)) {
            std::string t = trim(line);
            if (!t.empty()) steps.push_back(t);
        }
        return steps;
    }
    std::vector<std::pair<std::size_t, std::size_t>> marks;  // (pos, len)
    for (auto it = begin; it != end; ++it)
        marks.emplace_back(static_cast<std::size_t>(it->position()), it->str().size());
    for (std::size_t i = 0; i < marks.size(); ++i) {
        std::size_t body = marks[i].first + marks[i].second;
        std::size_t stop = (i + 1 < marks.size()) ? marks[i + 1].first : text.size();
        std::string step = trim(text.substr(body, stop - body));
        if (!step.empty()) steps.push_back(step);
    }
    return steps;
}

// Extracts the inner text of the first <tag>...</tag> block, case-insensitive.
inline std::optional<std::string> extract_tag(const std::string& text, const std::string& tag) {
    std::string lower = to_lower(text);
    std::string open = "<" + tag + ">";
    std::string close = "</" + tag + ">";
    std::size_t b = lower.find(open);
    if (b == std::string::npos) return std::nullopt;
    b += open.size();
    std::size_t e = lower.find(close, b);
    if (e == std::string::npos) return std::nullopt;
    return text.substr(b, e - b);
}

}  // namespace logreasoner
