#pragma once
// Stage 2: generate think-then-answer trajectories with the thought-enhanced
// student, partition them by answer correctness, run teacher error
// correction via the exclusion method, and build the preference dataset.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "logreasoner/core.hpp"
#include "logreasoner/dataset.hpp"
#include "logreasoner/gateway.hpp"
#include "logreasoner/prompts.hpp"
#include "logreasoner/stage1.hpp"
#include "logreasoner/util.hpp"

namespace logreasoner {

// Parses a think-then-answer generation: <solutions> split into steps and
// <answer> canonicalized to a label. Any missing piece yields parse_ok=false.
inline Trajectory parse_trajectory(const TaskCatalog& catalog, TaskKind task, const std::string& raw) {
    Trajectory traj;
    traj.raw = raw;
    if (auto solutions = extract_tag(raw, "solutions")) traj.steps = split_solution_steps(*solutions);
    if (auto answer = extract_tag(raw, "answer")) traj.answer = catalog.canonicalize(task, *answer);
    traj.parse_ok = !traj.steps.empty() && traj.answer.has_value();
    return traj;
}

inline std::string serialize_trajectory(const std::vector<std::string>& steps,
                                        const std::string& answer_value) {
    std::string out = "<solutions>\n";
    for (std::size_t i = 0; i < steps.size(); ++i)
        out += "Step " + std::to_string(i + 1) + ": " + steps[i] + "\n";
    out += "</solutions>\n<answer>" + answer_value + "</answer>";
    return out;
}

inline std::vector<Trajectory> generate_trajectories(const Gateway& gateway, const ModelRole& student,
                                                     const PromptStore& store,
                                                     const TaskCatalog& catalog,
                                                     const std::vector<TaskInstance>& instances,
                                                     double temperature, int max_tokens) {
    std::vector<PromptRequest> requests;
    requests.reserve(instances.size());
    for (const TaskInstance& inst : instances) {
        std::string prompt = render_solution_prompt(store, catalog, inst.task, inst.input_payload);
        requests.push_back(
            user_prompt(student.endpoint_id, prompt, temperature, max_tokens, "traj:" + inst.id));
    }
    std::vector<Completion> completions = gateway.complete_batch(requests);

    std::vector<Trajectory> out;
    out.reserve(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (completions[i].finish == Finish::Error) {
            Trajectory t;
            t.raw = "[gateway-error] " + completions[i].note;
            t.parse_ok = false;
            out.push_back(std::move(t));
        } else {
            out.push_back(parse_trajectory(catalog, instances[i].task, completions[i].text));
        }
    }
    return out;
}

struct Partition {
    std::vector<std::pair<TaskInstance, Trajectory>> correct;
    std::vector<std::pair<TaskInstance, Trajectory>> erroneous;
};

// Correct iff the trajectory parsed and its answer matches gold; everything
// else, including unparseable generations, lands in the erroneous set.
inline Partition partition_trajectories(const std::vector<std::pair<TaskInstance, Trajectory>>& items) {
    Partition p;
    for (const auto& item : items) {
        const auto& [instance, traj] = item;
        if (traj.parse_ok && match_answer(traj.answer, instance.gold)) p.correct.push_back(item);
        else p.erroneous.push_back(item);
    }
    return p;
}

struct PartitionCounts {
    std::size_t correct = 0;
    std::size_t erroneous = 0;
};

inline std::map<std::pair<std::string, std::string>, PartitionCounts> partition_counts(
    const Partition& p) {
    std::map<std::pair<std::string, std::string>, PartitionCounts> counts;
    for (const auto& [inst, traj] : p.correct) counts[{task_name(inst.task), inst.source}].correct++;
    for (const auto& [inst, traj] : p.erroneous) counts[{task_name(inst.task), inst.source}].erroneous++;
    return counts;
}

// ---------------------------------------------------------------------------
// Teacher correction (exclusion method)
//
// The teacher reply is a JSON object:
//   {"first_error_step": k, "reflection": "...", "revised_steps": [...], "answer": "..."}
// k is 1-based; steps 1..k-1 of the rejected trajectory are preserved
// verbatim and the revised steps replace everything from k on. The corrected
// answer must fold to the gold label or the attempt is retried.

struct CorrectionAttemptError {
    std::string reason;
};

inline std::optional<CorrectionResult> parse_correction_reply(const TaskCatalog& catalog,
                                                              const TaskInstance& instance,
                                                              const Trajectory& rejected,
                                                              const std::string& text,
                                                              std::string& reason) {
    auto j = extract_json_object(text);
    if (!j) {
        reason = "reply is not a JSON object";
        return std::nullopt;
    }
    long k = 0;
    std::string reflection;
    std::vector<std::string> revised;
    std::string answer_raw;
    try {
        k = j->at("first_error_step").get<long>();
        reflection = j->value("reflection", "");
        for (const auto& s : j->at("revised_steps")) {
            std::string step = trim(s.get<std::string>());
            if (step.empty()) {
                reason = "revised step is empty";
                return std::nullopt;
            }
            revised.push_back(std::move(step));
        }
        answer_raw = j->at("answer").get<std::string>();
    } catch (const std::exception& e) {
        reason = std::string("malformed correction fields: ") + e.what();
        return std::nullopt;
    }
    if (k < 1 || static_cast<std::size_t>(k) > rejected.steps.size()) {
        reason = "first_error_step " + std::to_string(k) + " out of range 1.." +
                 std::to_string(rejected.steps.size());
        return std::nullopt;
    }
    if (revised.empty()) {
        reason = "no revised steps";
        return std::nullopt;
    }
    std::optional<Label> answer = catalog.canonicalize(instance.task, answer_raw);
    if (!match_answer(answer, instance.gold)) {
        reason = "corrected answer '" + answer_raw + "' does not match gold '" + instance.gold.value + "'";
        return std::nullopt;
    }

    CorrectionResult result;
    result.first_error_index = static_cast<std::size_t>(k);
    result.reflection = reflection;
    result.corrected.steps.assign(rejected.steps.begin(),
                                  rejected.steps.begin() + (k - 1));  // preserved prefix
    result.corrected.steps.insert(result.corrected.steps.end(), revised.begin(), revised.end());
    result.corrected.answer = answer;
    result.corrected.raw = serialize_trajectory(result.corrected.steps, answer->value);
    result.corrected.parse_ok = true;
    return result;
}

struct CorrectedItem {
    TaskInstance instance;
    Trajectory rejected;
    CorrectionResult result;
};

struct CorrectionRun {
    std::vector<CorrectedItem> corrected;                       // input order
    std::vector<std::pair<std::string, std::string>> dropped;   // (instance id, reason)
};

// Unparseable rejected trajectories have no step sequence for the teacher to
// audit; they are corrected against a single placeholder step so the
// exclusion prompt still applies (k = 1, full reconstruction).
inline Trajectory correction_view(const Trajectory& rejected) {
    if (!rejected.steps.empty()) return rejected;
    Trajectory view = rejected;
    view.steps = {"(the model produced no parseable reasoning steps)"};
    return view;
}

inline CorrectionRun correct_trajectories(const Gateway& gateway, const ModelRole& teacher,
                                          const PromptStore& store, const TaskCatalog& catalog,
                                          const std::vector<std::pair<TaskInstance, Trajectory>>& erroneous,
                                          int max_attempts, double temperature, int max_tokens) {
    if (max_attempts < 1) throw ConfigError("max_attempts must be positive");
    CorrectionRun run;
    std::vector<std::optional<CorrectionResult>> slots(erroneous.size());
    std::vector<std::string> last_reason(erroneous.size(), "no attempt made");
    std::vector<std::size_t> pending(erroneous.size());
    for (std::size_t i = 0; i < erroneous.size(); ++i) pending[i] = i;

    for (int attempt = 1; attempt <= max_attempts && !pending.empty(); ++attempt) {
        std::vector<PromptRequest> requests;
        requests.reserve(pending.size());
        for (std::size_t idx : pending) {
            const auto& [instance, rejected] = erroneous[idx];
            std::string prompt =
                render_correction_prompt(store, catalog, instance, correction_view(rejected));
            requests.push_back(user_prompt(teacher.endpoint_id, prompt, temperature, max_tokens,
                                           "correct:" + instance.id));
        }
        std::vector<Completion> completions = gateway.complete_batch(requests);

        std::vector<std::size_t> still_pending;
        for (std::size_t r = 0; r < pending.size(); ++r) {
            std::size_t idx = pending[r];
            const auto& [instance, rejected] = erroneous[idx];
            if (completions[r].finish == Finish::Error) {
                last_reason[idx] = "gateway error: " + completions[r].note;
                still_pending.push_back(idx);
                continue;
            }
            slots[idx] = parse_correction_reply(catalog, instance, correction_view(rejected),
                                                completions[r].text, last_reason[idx]);
            if (!slots[idx]) still_pending.push_back(idx);
        }
        pending = std::move(still_pending);
    }

    for (std::size_t i = 0; i < erroneous.size(); ++i) {
        if (slots[i]) {
            run.corrected.push_back({erroneous[i].first, erroneous[i].second, std::move(*slots[i])});
        } else {
            run.dropped.emplace_back(erroneous[i].first.id,
                                     "correction failed after " + std::to_string(max_attempts) +
                                         " attempts: " + last_reason[i]);
        }
    }
    return run;
}

inline std::vector<PreferencePair> build_pref_pairs(const std::vector<CorrectedItem>& items) {
    std::vector<PreferencePair> pairs;
    pairs.reserve(items.size());
    for (const CorrectedItem& item : items) {
        const std::size_t k = item.result.first_error_index;
        const Trajectory& rejected_view = correction_view(item.rejected);
        if (item.result.corrected.steps.size() < k - 1)
            throw InvariantViolation("corrected trajectory shorter than its preserved prefix");
        for (std::size_t i = 0; i + 1 < k; ++i)
            if (item.result.corrected.steps[i] != rejected_view.steps[i])
                throw InvariantViolation("corrected trajectory does not preserve step " +
                                         std::to_string(i + 1) + " for instance " + item.instance.id);
        pairs.push_back(make_preference_pair(item.instance, item.result.corrected, item.rejected));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Dataset record construction

// The DPO prompt field is the same rendered solution prompt used for
// generation; chosen is the reconstructed corrected trajectory and rejected
// is the original raw generation.
inline std::vector<DpoRecord> to_dpo_records(const std::vector<PreferencePair>& pairs,
                                             const PromptStore& store, const TaskCatalog& catalog) {
    std::vector<DpoRecord> records;
    records.reserve(pairs.size());
    for (const PreferencePair& p : pairs) {
        DpoRecord r;
        r.prompt = render_solution_prompt(store, catalog, p.instance.task, p.instance.input_payload);
        r.chosen = p.chosen.raw;
        r.rejected = p.rejected.raw.empty() ? serialize_trajectory(p.rejected.steps, "unknown")
                                            : p.rejected.raw;
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<SftRecord> to_solution_sft_records(
    const std::vector<std::pair<TaskInstance, Trajectory>>& correct, const PromptStore& store,
    const TaskCatalog& catalog) {
    std::vector<SftRecord> records;
    records.reserve(correct.size());
    for (const auto& [instance, traj] : correct) {
        records.push_back({solution_instruction(store, catalog, instance.task), instance.input_payload,
                           traj.raw});
    }
    return records;
}

// ---------------------------------------------------------------------------
// Trajectory dump JSONL:
//   {instance_id, task, raw, steps[], answer, parse_ok, disposition}

struct TrajectoryRecord {
    std::string instance_id;
    TaskKind task = TaskKind::AnomalyDetection;
    Trajectory trajectory;
    std::string disposition;  // correct | erroneous | corrected | dropped
};

inline nlohmann::ordered_json trajectory_record_to_json(const TrajectoryRecord& r) {
    nlohmann::ordered_json j;
    j["instance_id"] = r.instance_id;
    j["task"] = task_name(r.task);
    j["raw"] = r.trajectory.raw;
    j["steps"] = r.trajectory.steps;
    j["answer"] = r.trajectory.answer ? nlohmann::ordered_json(r.trajectory.answer->value)
                                      : nlohmann::ordered_json(nullptr);
    j["parse_ok"] = r.trajectory.parse_ok;
    j["disposition"] = r.disposition;
    return j;
}

inline TrajectoryRecord trajectory_record_from_json(const nlohmann::json& j, std::size_t line,
                                                    const TaskCatalog& catalog) {
    TrajectoryRecord r;
    try {
        r.instance_id = j.at("instance_id").get<std::string>();
        auto task = task_from_name(j.at("task").get<std::string>());
        if (!task) throw ParseError("unknown task", line);
        r.task = *task;
        r.trajectory.raw = j.at("raw").get<std::string>();
        for (const auto& s : j.at("steps")) r.trajectory.steps.push_back(s.get<std::string>());
        if (!j.at("answer").is_null())
            r.trajectory.answer = catalog.canonicalize(r.task, j.at("answer").get<std::string>());
        r.trajectory.parse_ok = j.at("parse_ok").get<bool>();
        r.disposition = j.at("disposition").get<std::string>();
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception& e) {
        throw ParseError(std::string("malformed trajectory record: ") + e.what(), line);
    }
    return r;
}

inline void write_trajectory_records(const std::vector<TrajectoryRecord>& records,
                                     const std::filesystem::path& path) {
    std::string body;
    for (const TrajectoryRecord& r : records) {
        body += trajectory_record_to_json(r).dump();
        body += '\n';
    }
    write_text_file_atomic(path, body);
}

inline std::vector<TrajectoryRecord> read_trajectory_records(const std::filesystem::path& path,
                                                             const TaskCatalog& catalog) {
    std::vector<TrajectoryRecord> records;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("invalid JSON", line);
        records.push_back(trajectory_record_from_json(j, line, catalog));
    });
    return records;
}

}  // namespace logreasoner
