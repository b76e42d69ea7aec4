#pragma once
// Evaluation harness for the four log-analysis tasks: fixed-window
// sessionization, negative sampling for semantic matching, 3-shot ICL
// prompting at temperature 0, answer extraction, and metric computation.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "logreasoner/core.hpp"
#include "logreasoner/gateway.hpp"
#include "logreasoner/prompts.hpp"
#include "logreasoner/util.hpp"

namespace logreasoner {

using ordered_json = nlohmann::ordered_json;

struct EmptyInputError : std::runtime_error {
    explicit EmptyInputError(const std::string& what) : std::runtime_error(what) {}
};
struct InsufficientCorpusError : std::runtime_error {
    explicit InsufficientCorpusError(const std::string& what) : std::runtime_error(what) {}
};
struct ExemplarCountMismatchError : std::runtime_error {
    explicit ExemplarCountMismatchError(const std::string& what) : std::runtime_error(what) {}
};

// A fixed window of consecutive logs, labeled abnormal iff any member is.
struct Session {
    std::vector<LogRecord> logs;
    Label label{TaskKind::AnomalyDetection, "normal"};
};

inline std::vector<Session> sessionize(const std::vector<LogRecord>& records, std::size_t window) {
    if (window == 0) throw std::invalid_argument("sessionize: window must be positive");
    std::vector<Session> sessions;
    sessions.reserve(records.size() / window + 1);
    for (std::size_t begin = 0; begin < records.size(); begin += window) {
        std::size_t end = std::min(begin + window, records.size());
        Session s;
        s.logs.assign(records.begin() + static_cast<std::ptrdiff_t>(begin),
                      records.begin() + static_cast<std::ptrdiff_t>(end));
        bool abnormal = false;
        for (const LogRecord& r : s.logs)
            abnormal = abnormal || (r.gold_label && r.gold_label->value == "abnormal");
        s.label.value = abnormal ? "abnormal" : "normal";
        sessions.push_back(std::move(s));
    }
    return sessions;
}

inline std::vector<TaskInstance> sessions_to_instances(const std::vector<Session>& sessions,
                                                       const std::string& source) {
    std::vector<TaskInstance> instances;
    instances.reserve(sessions.size());
    for (std::size_t i = 0; i < sessions.size(); ++i) {
        TaskInstance inst;
        char id[32];
        std::snprintf(id, sizeof(id), "sess-%06zu", i);
        inst.id = id;
        inst.task = TaskKind::AnomalyDetection;
        for (std::size_t j = 0; j < sessions[i].logs.size(); ++j) {
            if (j) inst.input_payload += '\n';
            inst.input_payload += sessions[i].logs[j].raw_line;
        }
        inst.gold = sessions[i].label;
        inst.source = source;
        instances.push_back(std::move(inst));
    }
    return instances;
}

struct LsmPair {
    std::string log;
    std::string description;
};

// For each pair, a match instance with the gold description and a mismatch
// instance with a seeded-uniform negative drawn from the other descriptions;
// the negative never equals the gold text.
inline std::vector<TaskInstance> build_lsm_instances(const std::vector<LsmPair>& pairs,
                                                     std::uint64_t seed,
                                                     const std::string& source = "lsm") {
    std::set<std::string> distinct;
    for (const LsmPair& p : pairs) distinct.insert(p.description);
    if (distinct.size() < 2)
        throw InsufficientCorpusError("log semantic matching needs at least 2 distinct descriptions");

    Rng rng(seed);
    std::vector<TaskInstance> out;
    out.reserve(pairs.size() * 2);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const LsmPair& p = pairs[i];
        std::vector<std::size_t> candidates;
        for (std::size_t j = 0; j < pairs.size(); ++j)
            if (j != i && pairs[j].description != p.description) candidates.push_back(j);
        const std::string& negative = pairs[candidates[rng.bounded(candidates.size())]].description;

        char id[32];
        std::snprintf(id, sizeof(id), "lsm-%05zu", i);
        TaskInstance match;
        match.id = std::string(id) + "-match";
        match.task = TaskKind::LogSemanticMatching;
        match.input_payload = "Log: " + p.log + "\nDescription: " + p.description;
        match.gold = Label{TaskKind::LogSemanticMatching, "match"};
        match.source = source;

        TaskInstance mismatch;
        mismatch.id = std::string(id) + "-mismatch";
        mismatch.task = TaskKind::LogSemanticMatching;
        mismatch.input_payload = "Log: " + p.log + "\nDescription: " + negative;
        mismatch.gold = Label{TaskKind::LogSemanticMatching, "mismatch"};
        mismatch.source = source;

        out.push_back(std::move(match));
        out.push_back(std::move(mismatch));
    }
    return out;
}

struct Exemplar {
    std::string id;
    std::string input;
    std::string reasoning;
    std::string answer;  // canonical label value
};

inline std::string render_exemplar_block(const std::vector<Exemplar>& exemplars) {
    std::string out;
    for (const Exemplar& e : exemplars) {
        out += "Input:\n" + e.input + "\n<solutions>\n" + e.reasoning + "\n</solutions>\n<answer>" +
               e.answer + "</answer>\n\n";
    }
    return out;
}

// Renders the task's fixed ICL prompt with exactly three worked exemplars
// followed by the query instance. Temperature is pinned at 0.
inline PromptRequest build_icl_prompt(const PromptStore& store, const TaskCatalog& catalog,
                                      const TaskInstance& instance,
                                      const std::vector<Exemplar>& exemplars,
                                      const std::string& endpoint_id, int max_tokens) {
    if (exemplars.size() != 3)
        throw ExemplarCountMismatchError("expected exactly 3 exemplars, got " +
                                         std::to_string(exemplars.size()));
    std::string prompt =
        store.render("eval_icl", {{"instruction", solution_instruction(store, catalog, instance.task)},
                                  {"exemplars", render_exemplar_block(exemplars)},
                                  {"input", instance.input_payload}});
    return user_prompt(endpoint_id, prompt, 0.0, max_tokens, "eval:" + instance.id);
}

// Primary path parses the <answer> tag; the fallback scans the final
// non-empty line for exactly one canonical label (word-boundary match).
inline std::optional<Label> extract_answer(const TaskCatalog& catalog, TaskKind task,
                                           const std::string& text) {
    if (auto tagged = extract_tag(text, "answer")) {
        if (auto label = catalog.canonicalize(task, *tagged)) return label;
    }
    std::vector<std::string> lines = split_lines(text);
    std::string last;
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        if (!trim(*it).empty()) {
            last = to_lower(*it);
            break;
        }
    }
    if (last.empty()) return std::nullopt;

    auto word_boundary_contains = [&](const std::string& needle) {
        auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
        std::size_t pos = 0;
        while ((pos = last.find(needle, pos)) != std::string::npos) {
            bool left_ok = pos == 0 || !is_word(last[pos - 1]);
            std::size_t end = pos + needle.size();
            bool right_ok = end == last.size() || !is_word(last[end]);
            if (left_ok && right_ok) return true;
            ++pos;
        }
        return false;
    };

    std::set<std::string> found;
    for (const auto& [synonym, canonical] : catalog.fold_table(task))
        if (word_boundary_contains(synonym)) found.insert(canonical);
    if (found.size() == 1) return Label{task, *found.begin()};
    return std::nullopt;  // ambiguous or absent
}

struct MetricSet {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
    double weighted_f1 = 0.0;
    std::map<std::string, std::size_t> support;  // gold counts per class
};

// Positive class: abnormal (AD), failure (PFP); match for LSM and the first
// configured category for RCA. An unparseable prediction counts wrong in
// every metric; for positive-class P/R/F1 it counts as a negative-class
// prediction, and inside per-class F1s it matches no class.
inline MetricSet score(const TaskCatalog& catalog, TaskKind task,
                       const std::vector<std::pair<std::optional<Label>, Label>>& items) {
    if (items.empty()) throw EmptyInputError("score: no predictions");
    const std::vector<std::string>& classes = catalog.values(task);
    const std::string& positive = catalog.positive_value(task);
    const double n = static_cast<double>(items.size());

    MetricSet m;
    for (const std::string& c : classes) m.support[c] = 0;

    std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
    std::map<std::string, std::array<std::size_t, 3>> per_class;  // class -> {tp, fp, fn}
    for (const std::string& c : classes) per_class[c] = {0, 0, 0};

    for (const auto& [pred, gold] : items) {
        if (!catalog.is_valid(gold)) throw InvariantViolation("score: gold label '" + gold.value +
                                                              "' is not in the task vocabulary");
        m.support[gold.value] += 1;
        if (match_answer(pred, gold)) ++correct;

        bool pred_pos = pred.has_value() && pred->value == positive;
        bool gold_pos = gold.value == positive;
        if (pred_pos && gold_pos) ++tp;
        if (pred_pos && !gold_pos) ++fp;
        if (!pred_pos && gold_pos) ++fn;

        for (const std::string& c : classes) {
            bool pred_c = pred.has_value() && pred->value == c;
            bool gold_c = gold.value == c;
            if (pred_c && gold_c) per_class[c][0] += 1;
            if (pred_c && !gold_c) per_class[c][1] += 1;
            if (!pred_c && gold_c) per_class[c][2] += 1;
        }
    }

    auto prf = [](std::size_t tp_, std::size_t fp_, std::size_t fn_) {
        double p = tp_ + fp_ > 0 ? static_cast<double>(tp_) / static_cast<double>(tp_ + fp_) : 0.0;
        double r = tp_ + fn_ > 0 ? static_cast<double>(tp_) / static_cast<double>(tp_ + fn_) : 0.0;
        double f = p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
        return std::array<double, 3>{p, r, f};
    };

    auto pos = prf(tp, fp, fn);
    m.precision = pos[0];
    m.recall = pos[1];
    m.f1 = pos[2];
    m.accuracy = static_cast<double>(correct) / n;
    for (const std::string& c : classes) {
        auto [ctp, cfp, cfn] = per_class[c];
        m.weighted_f1 += static_cast<double>(m.support[c]) / n * prf(ctp, cfp, cfn)[2];
    }
    return m;
}

struct EvalRun {
    TaskKind task = TaskKind::AnomalyDetection;
    std::string endpoint_id;
    std::vector<std::string> exemplar_ids;
    double temperature = 0.0;
    std::vector<std::pair<std::string, std::optional<Label>>> predictions;  // instance id -> label
    MetricSet metrics;
};

inline EvalRun run_eval(const Gateway& gateway, const PromptStore& store, const TaskCatalog& catalog,
                        TaskKind task, const std::vector<TaskInstance>& instances,
                        const std::vector<Exemplar>& exemplars, const std::string& endpoint_id,
                        int max_tokens) {
    if (instances.empty()) throw EmptyInputError("run_eval: no instances");
    std::set<std::string> exemplar_ids;
    for (const Exemplar& e : exemplars) exemplar_ids.insert(e.id);
    for (const TaskInstance& inst : instances)
        if (exemplar_ids.count(inst.id))
            throw InvariantViolation("exemplar id '" + inst.id + "' overlaps evaluated instances");

    std::vector<PromptRequest> requests;
    requests.reserve(instances.size());
    for (const TaskInstance& inst : instances)
        requests.push_back(build_icl_prompt(store, catalog, inst, exemplars, endpoint_id, max_tokens));
    std::vector<Completion> completions = gateway.complete_batch(requests);

    EvalRun run;
    run.task = task;
    run.endpoint_id = endpoint_id;
    for (const Exemplar& e : exemplars) run.exemplar_ids.push_back(e.id);
    run.temperature = 0.0;

    std::vector<std::pair<std::optional<Label>, Label>> scored;
    scored.reserve(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        std::optional<Label> pred;
        if (completions[i].finish != Finish::Error)
            pred = extract_answer(catalog, task, completions[i].text);
        run.predictions.emplace_back(instances[i].id, pred);
        scored.emplace_back(pred, instances[i].gold);
    }
    run.metrics = score(catalog, task, scored);
    return run;
}

inline std::string format_pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
    return buf;
}

inline ordered_json eval_report_json(const EvalRun& run) {
    ordered_json j;
    j["task"] = task_name(run.task);
    j["endpoint"] = run.endpoint_id;
    j["temperature"] = run.temperature;
    j["exemplar_ids"] = run.exemplar_ids;
    j["instances"] = run.predictions.size();
    j["predictions"] = ordered_json::array();
    for (const auto& [id, pred] : run.predictions) {
        ordered_json p;
        p["id"] = id;
        p["predicted"] = pred ? ordered_json(pred->value) : ordered_json(nullptr);
        j["predictions"].push_back(std::move(p));
    }
    ordered_json metrics;
    metrics["precision"] = run.metrics.precision;
    metrics["recall"] = run.metrics.recall;
    metrics["f1"] = run.metrics.f1;
    metrics["accuracy"] = run.metrics.accuracy;
    metrics["weighted_f1"] = run.metrics.weighted_f1;
    metrics["support"] = ordered_json(run.metrics.support);
    j["metrics"] = std::move(metrics);
    return j;
}

// Text table mirroring the Precision/Recall/F1 and Accuracy/Weighted-F1
// presentation, values as percentages with two decimals.
inline std::string eval_report_text(const EvalRun& run) {
    const MetricSet& m = run.metrics;
    std::string out;
    out += "Task: " + task_display_name(run.task) + "\n";
    out += "Endpoint: " + run.endpoint_id + "\n";
    out += "Instances: " + std::to_string(run.predictions.size()) + "\n";
    out += "Exemplars: ";
    for (std::size_t i = 0; i < run.exemplar_ids.size(); ++i) {
        if (i) out += ", ";
        out += run.exemplar_ids[i];
    }
    out += "\n";
    out += "Precision / Recall / F1 : " + format_pct(m.precision) + " / " + format_pct(m.recall) +
           " / " + format_pct(m.f1) + "\n";
    out += "Accuracy / Weighted-F1  : " + format_pct(m.accuracy) + " / " + format_pct(m.weighted_f1) +
           "\n";
    out += "Support:";
    for (const auto& [cls, count] : m.support) out += " " + cls + "=" + std::to_string(count);
    out += "\n";
    return out;
}

inline void write_eval_report(const EvalRun& run, const std::filesystem::path& json_path,
                              const std::filesystem::path& text_path) {
    write_text_file_atomic(json_path, eval_report_json(run).dump(2) + "\n");
    write_text_file_atomic(text_path, eval_report_text(run));
}

// ---------------------------------------------------------------------------
// Input loaders

// Either JSONL {raw_line, gold_label?} or plain text with an optional sidecar
// label file (one of normal|abnormal|- per line, aligned by line number).
inline std::vector<LogRecord> load_log_records(const std::filesystem::path& path,
                                               const std::optional<std::filesystem::path>& labels_path,
                                               const std::string& source) {
    std::vector<LogRecord> records;
    if (path.extension() == ".jsonl") {
        for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
            nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
            if (j.is_discarded() || !j.contains("raw_line"))
                throw ParseError("malformed log record", line);
            LogRecord r;
            r.raw_line = j.at("raw_line").get<std::string>();
            if (trim(r.raw_line).empty()) throw ParseError("empty raw_line", line);
            r.source = source;
            r.seq_index = records.size();
            if (j.contains("gold_label") && !j.at("gold_label").is_null()) {
                std::string v = j.at("gold_label").get<std::string>();
                if (v != "normal" && v != "abnormal")
                    throw ParseError("gold_label must be normal or abnormal, got '" + v + "'", line);
                r.gold_label = Label{TaskKind::AnomalyDetection, v};
            }
            records.push_back(std::move(r));
        });
        return records;
    }

    std::vector<std::string> lines = split_lines(read_text_file(path));
    std::vector<std::string> labels;
    if (labels_path) labels = split_lines(read_text_file(*labels_path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        LogRecord r;
        r.raw_line = lines[i];
        r.source = source;
        r.seq_index = records.size();
        if (i < labels.size()) {
            std::string v = trim(labels[i]);
            if (v == "normal" || v == "abnormal") r.gold_label = Label{TaskKind::AnomalyDetection, v};
            else if (v != "-" && !v.empty())
                throw ParseError("label must be normal, abnormal or '-', got '" + v + "'", i + 1);
        }
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<LsmPair> load_lsm_pairs(const std::filesystem::path& path) {
    std::vector<LsmPair> pairs;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded() || !j.contains("log") || !j.contains("description"))
            throw ParseError("malformed lsm pair", line);
        pairs.push_back({j.at("log").get<std::string>(), j.at("description").get<std::string>()});
    });
    return pairs;
}

// JSONL {id, task, input, gold, source}; gold is a raw value folded through
// the catalog so file contents may use synonyms.
inline std::vector<TaskInstance> load_task_instances(const std::filesystem::path& path,
                                                     const TaskCatalog& catalog) {
    std::vector<TaskInstance> instances;
    std::set<std::string> seen_ids;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("malformed task instance", line);
        TaskInstance inst;
        try {
            inst.id = j.at("id").get<std::string>();
            auto task = task_from_name(j.at("task").get<std::string>());
            if (!task) throw ParseError("unknown task '" + j.at("task").get<std::string>() + "'", line);
            inst.task = *task;
            inst.input_payload = j.at("input").get<std::string>();
            auto gold = catalog.canonicalize(inst.task, j.at("gold").get<std::string>());
            if (!gold)
                throw ParseError("gold '" + j.at("gold").get<std::string>() + "' is not a valid " +
                                     task_name(inst.task) + " label",
                                 line);
            inst.gold = *gold;
            inst.source = j.value("source", "unknown");
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(std::string("malformed task instance: ") + e.what(), line);
        }
        if (inst.input_payload.empty()) throw ParseError("empty input payload", line);
        if (!seen_ids.insert(inst.id).second) throw ParseError("duplicate instance id " + inst.id, line);
        instances.push_back(std::move(inst));
    });
    return instances;
}

// JSONL {id, input, reasoning, answer}.
inline std::vector<Exemplar> load_exemplars(const std::filesystem::path& path,
                                            const TaskCatalog& catalog, TaskKind task) {
    std::vector<Exemplar> exemplars;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("malformed exemplar", line);
        Exemplar e;
        e.id = j.at("id").get<std::string>();
        e.input = j.at("input").get<std::string>();
        e.reasoning = j.at("reasoning").get<std::string>();
        auto answer = catalog.canonicalize(task, j.at("answer").get<std::string>());
        if (!answer)
            throw ParseError("exemplar answer '" + j.at("answer").get<std::string>() +
                                 "' is not a valid " + task_name(task) + " label",
                             line);
        e.answer = answer->value;
        exemplars.push_back(std::move(e));
    });
    return exemplars;
}

}  // namespace logreasoner
