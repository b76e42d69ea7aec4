#pragma once
// Stage 1: build the high-level thought dataset. Ingest and filter raw
// troubleshooting cases, generate verified CoT rationales for task samples,
// DPP-filter for semantic diversity, distill thought templates through the
// teacher, and apply the human review flow.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "logreasoner/core.hpp"
#include "logreasoner/dataset.hpp"
#include "logreasoner/dpp.hpp"
#include "logreasoner/eval.hpp"
#include "logreasoner/gateway.hpp"
#include "logreasoner/prompts.hpp"
#include "logreasoner/util.hpp"

namespace logreasoner {

struct UnknownTemplateIdError : std::runtime_error {
    explicit UnknownTemplateIdError(const std::string& what) : std::runtime_error(what) {}
};

struct IngestFilter {
    std::size_t min_symptom_chars = 80;
    std::size_t min_flowchart_steps = 3;  // the paper's exclusion rule; must stay >= 3
};

inline void validate_filter(const IngestFilter& f) {
    if (f.min_flowchart_steps < 3)
        throw ConfigError("min_flowchart_steps must be >= 3, got " +
                          std::to_string(f.min_flowchart_steps));
    if (f.min_symptom_chars == 0) throw ConfigError("min_symptom_chars must be positive");
}

// ---------------------------------------------------------------------------
// Case JSONL: {problem, raw_analysis, origin, source, gold?}

inline nlohmann::ordered_json case_to_json(const AnalysisCase& c) {
    nlohmann::ordered_json j;
    j["problem"] = c.problem;
    j["raw_analysis"] = c.raw_analysis;
    j["origin"] = case_origin_name(c.origin);
    j["source"] = c.source;
    if (c.gold) {
        j["gold"] = {{"task", task_name(c.gold->task)}, {"value", c.gold->value}};
    }
    return j;
}

inline AnalysisCase case_from_json(const nlohmann::json& j, std::size_t line) {
    AnalysisCase c;
    try {
        c.problem = j.at("problem").get<std::string>();
        c.raw_analysis = j.at("raw_analysis").get<std::string>();
        auto origin = case_origin_from_name(j.at("origin").get<std::string>());
        if (!origin) throw ParseError("unknown origin '" + j.at("origin").get<std::string>() + "'", line);
        c.origin = *origin;
        c.source = j.value("source", "unknown");
        if (j.contains("gold") && !j.at("gold").is_null()) {
            auto task = task_from_name(j.at("gold").at("task").get<std::string>());
            if (!task) throw ParseError("unknown gold task", line);
            c.gold = Label{*task, j.at("gold").at("value").get<std::string>()};
        }
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception& e) {
        throw ParseError(std::string("malformed case record: ") + e.what(), line);
    }
    if (trim(c.problem).empty() || trim(c.raw_analysis).empty())
        throw ParseError("case has an empty problem or raw_analysis", line);
    if (c.origin == CaseOrigin::Handbook && c.gold)
        throw ParseError("handbook case must not carry a gold label", line);
    if (c.origin == CaseOrigin::TaskRationale && !c.gold)
        throw ParseError("task_rationale case must carry a gold label", line);
    return c;
}

inline void write_cases(const std::vector<AnalysisCase>& cases, const std::filesystem::path& path) {
    std::string body;
    for (const AnalysisCase& c : cases) {
        body += case_to_json(c).dump();
        body += '\n';
    }
    write_text_file_atomic(path, body);
}

inline std::vector<AnalysisCase> read_cases(const std::filesystem::path& path) {
    std::vector<AnalysisCase> cases;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("invalid JSON", line);
        cases.push_back(case_from_json(j, line));
    });
    return cases;
}

// ---------------------------------------------------------------------------
// Ingestion

struct IngestResult {
    std::vector<AnalysisCase> cases;
    std::size_t dropped_short_symptom = 0;
    std::size_t dropped_few_steps = 0;
};

// The flowchart step count is taken from the same step segmentation used for
// trajectories: "Step N:" markers, or one step per non-empty line.
inline std::size_t flowchart_step_count(const AnalysisCase& c) {
    return split_solution_steps(c.raw_analysis).size();
}

inline IngestResult ingest_handbook_cases(const std::filesystem::path& path,
                                          const IngestFilter& filter) {
    validate_filter(filter);
    IngestResult result;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("invalid JSON", line);
        AnalysisCase c = case_from_json(j, line);
        if (trim(c.problem).size() < filter.min_symptom_chars) {
            ++result.dropped_short_symptom;
            return;
        }
        if (flowchart_step_count(c) < filter.min_flowchart_steps) {
            ++result.dropped_few_steps;
            return;
        }
        result.cases.push_back(std::move(c));
    });
    return result;
}

// ---------------------------------------------------------------------------
// CoT rationale generation for task samples

struct RationaleResult {
    std::vector<AnalysisCase> cases;      // retained: extracted answer matched gold
    std::size_t rejected_wrong_answer = 0;
    std::size_t gateway_errors = 0;
};

// One CoT generation per instance; only chains whose extracted answer matches
// the gold label are retained as raw analytical processes.
inline RationaleResult generate_rationales(const Gateway& gateway, const ModelRole& teacher,
                                           const PromptStore& store, const TaskCatalog& catalog,
                                           const std::vector<TaskInstance>& instances,
                                           double temperature, int max_tokens) {
    std::vector<PromptRequest> requests;
    requests.reserve(instances.size());
    for (const TaskInstance& inst : instances) {
        std::string prompt = render_rationale_prompt(store, catalog, inst.task, inst.input_payload);
        requests.push_back(user_prompt(teacher.endpoint_id, prompt, temperature, max_tokens,
                                       "rationale:" + inst.id));
    }
    std::vector<Completion> completions = gateway.complete_batch(requests);

    RationaleResult result;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const TaskInstance& inst = instances[i];
        const Completion& done = completions[i];
        if (done.finish == Finish::Error) {
            ++result.gateway_errors;
            continue;
        }
        std::optional<Label> answer = extract_answer(catalog, inst.task, done.text);
        if (!match_answer(answer, inst.gold)) {
            ++result.rejected_wrong_answer;
            continue;
        }
        AnalysisCase c;
        c.problem = inst.input_payload;
        c.raw_analysis = done.text;
        c.origin = CaseOrigin::TaskRationale;
        c.gold = inst.gold;
        c.source = inst.source;
        result.cases.push_back(std::move(c));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Semantic filter (DPP over raw-analysis embeddings)

inline std::vector<AnalysisCase> select_by_dpp(const Gateway& gateway, const ModelRole& embedder,
                                               const std::vector<AnalysisCase>& cases,
                                               std::size_t budget, double jitter,
                                               const std::string& tag) {
    std::vector<std::string> texts;
    texts.reserve(cases.size());
    for (const AnalysisCase& c : cases) texts.push_back(c.raw_analysis);
    Kernel kernel = build_kernel(gateway.embed(embedder.endpoint_id, texts, tag), jitter);
    Selection sel = dpp_select(kernel, budget);
    std::vector<AnalysisCase> out;
    out.reserve(sel.indices.size());
    for (std::size_t idx : sel.indices) out.push_back(cases[idx]);
    return out;
}

// Pooled by default. In per-source mode the budget is split across sources
// proportionally to their sizes (largest remainder), DPP runs within each
// source, and selections are concatenated in first-appearance source order.
inline std::vector<AnalysisCase> semantic_filter(const Gateway& gateway, const ModelRole& embedder,
                                                 const std::vector<AnalysisCase>& cases,
                                                 std::size_t budget, double jitter = 1e-6,
                                                 bool per_source = false) {
    if (budget > cases.size())
        throw BudgetExceededError("semantic_filter: budget " + std::to_string(budget) +
                                  " exceeds case count " + std::to_string(cases.size()));
    if (!per_source) return select_by_dpp(gateway, embedder, cases, budget, jitter, "embed:select");

    std::vector<std::string> order;
    std::map<std::string, std::vector<AnalysisCase>> by_source;
    for (const AnalysisCase& c : cases) {
        if (!by_source.count(c.source)) order.push_back(c.source);
        by_source[c.source].push_back(c);
    }

    // Largest-remainder apportionment of the budget, capped by group size.
    std::vector<std::size_t> quota(order.size(), 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < order.size(); ++g) {
        double exact = static_cast<double>(budget) * by_source[order[g]].size() / cases.size();
        quota[g] = static_cast<std::size_t>(exact);
        assigned += quota[g];
        remainders.emplace_back(exact - static_cast<double>(quota[g]), g);
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t r = 0; assigned < budget; r = (r + 1) % remainders.size()) {
        std::size_t g = remainders[r].second;
        if (quota[g] < by_source[order[g]].size()) {
            ++quota[g];
            ++assigned;
        }
    }

    std::vector<AnalysisCase> out;
    out.reserve(budget);
    for (std::size_t g = 0; g < order.size(); ++g) {
        if (quota[g] == 0) continue;
        auto picked = select_by_dpp(gateway, embedder, by_source[order[g]], quota[g], jitter,
                                    "embed:select:" + order[g]);
        out.insert(out.end(), picked.begin(), picked.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Template distillation

inline std::string template_id_for(const AnalysisCase& c) {
    return "t-" + sha256_hex(c.problem + "\x1f" + c.raw_analysis).substr(0, 12);
}

// Pulls the first JSON object out of a model reply, tolerating ``` fences
// and surrounding prose.
inline std::optional<nlohmann::json> extract_json_object(const std::string& text) {
    nlohmann::json direct = nlohmann::json::parse(text, nullptr, false);
    if (!direct.is_discarded() && direct.is_object()) return direct;
    std::size_t b = text.find('{');
    std::size_t e = text.rfind('}');
    if (b == std::string::npos || e == std::string::npos || e < b) return std::nullopt;
    nlohmann::json inner = nlohmann::json::parse(text.substr(b, e - b + 1), nullptr, false);
    if (!inner.is_discarded() && inner.is_object()) return inner;
    return std::nullopt;
}

inline std::optional<ThoughtTemplate> parse_template_reply(const std::string& text,
                                                           const AnalysisCase& source_case) {
    auto j = extract_json_object(text);
    if (!j) return std::nullopt;
    ThoughtTemplate tpl;
    tpl.id = template_id_for(source_case);
    tpl.problem = source_case.problem;
    tpl.review = ReviewStatus::Pending;
    try {
        tpl.overview = j->value("overview", "");
        tpl.challenge = j->at("challenge").get<std::string>();
        for (const auto& s : j->at("steps")) {
            std::string step = trim(s.get<std::string>());
            if (step.empty()) return std::nullopt;
            tpl.steps.push_back(std::move(step));
        }
    } catch (const std::exception&) {
        return std::nullopt;
    }
    if (trim(tpl.challenge).empty() || tpl.steps.empty()) return std::nullopt;
    return tpl;
}

struct DistillResult {
    std::vector<ThoughtTemplate> templates;  // review == Pending, in case order
    std::vector<std::string> unparsed_ids;   // excluded after one reprompt retry
};

inline DistillResult distill_templates(const Gateway& gateway, const ModelRole& teacher,
                                       const PromptStore& store,
                                       const std::vector<AnalysisCase>& cases, double temperature,
                                       int max_tokens) {
    DistillResult result;
    std::vector<std::optional<ThoughtTemplate>> slots(cases.size());
    std::vector<std::size_t> pending(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) pending[i] = i;

    // One initial wave plus one reprompt wave for malformed replies.
    for (int wave = 0; wave < 2 && !pending.empty(); ++wave) {
        std::vector<PromptRequest> requests;
        requests.reserve(pending.size());
        for (std::size_t idx : pending) {
            std::string prompt = render_distill_prompt(store, cases[idx].problem, cases[idx].raw_analysis);
            PromptRequest req = user_prompt(teacher.endpoint_id, prompt, temperature, max_tokens,
                                            "distill:" + template_id_for(cases[idx]));
            if (wave == 1)
                req.messages.back().content +=
                    "\n\nYour previous reply was not a valid JSON object. Respond with only a JSON "
                    "object with keys \"overview\", \"challenge\" and \"steps\".";
            requests.push_back(std::move(req));
        }
        std::vector<Completion> completions = gateway.complete_batch(requests);
        std::vector<std::size_t> still_pending;
        for (std::size_t r = 0; r < pending.size(); ++r) {
            std::size_t idx = pending[r];
            if (completions[r].finish != Finish::Error)
                slots[idx] = parse_template_reply(completions[r].text, cases[idx]);
            if (!slots[idx]) still_pending.push_back(idx);
        }
        pending = std::move(still_pending);
    }

    for (std::size_t i = 0; i < cases.size(); ++i) {
        if (slots[i]) result.templates.push_back(std::move(*slots[i]));
        else result.unparsed_ids.push_back(template_id_for(cases[i]));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Review queue and decisions

inline nlohmann::ordered_json template_to_json(const ThoughtTemplate& t, bool with_status) {
    nlohmann::ordered_json j;
    j["template_id"] = t.id;
    j["problem"] = t.problem;
    j["overview"] = t.overview;
    j["challenge"] = t.challenge;
    j["steps"] = t.steps;
    if (with_status) j["review"] = review_status_name(t.review);
    return j;
}

inline ThoughtTemplate template_from_json(const nlohmann::json& j, std::size_t line) {
    ThoughtTemplate t;
    try {
        t.id = j.at("template_id").get<std::string>();
        t.problem = j.at("problem").get<std::string>();
        t.overview = j.value("overview", "");
        t.challenge = j.at("challenge").get<std::string>();
        for (const auto& s : j.at("steps")) t.steps.push_back(s.get<std::string>());
        if (j.contains("review")) {
            auto status = review_status_from_name(j.at("review").get<std::string>());
            if (!status) throw ParseError("unknown review status", line);
            t.review = *status;
        }
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception& e) {
        throw ParseError(std::string("malformed template record: ") + e.what(), line);
    }
    if (t.steps.empty()) throw ParseError("template has no steps", line);
    return t;
}

inline void write_templates(const std::vector<ThoughtTemplate>& templates,
                            const std::filesystem::path& path, bool with_status) {
    std::string body;
    for (const ThoughtTemplate& t : templates) {
        body += template_to_json(t, with_status).dump();
        body += '\n';
    }
    write_text_file_atomic(path, body);
}

inline std::vector<ThoughtTemplate> read_templates(const std::filesystem::path& path) {
    std::vector<ThoughtTemplate> templates;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("invalid JSON", line);
        templates.push_back(template_from_json(j, line));
    });
    return templates;
}

enum class Verdict { Approve, Edit, Reject };

struct ReviewDecision {
    std::string template_id;
    Verdict verdict = Verdict::Approve;
    std::optional<ThoughtTemplate> edited;  // content only; required for Edit
};

// Decisions JSONL: {template_id, verdict, edited?{overview, challenge, steps}}
inline std::vector<ReviewDecision> read_decisions(const std::filesystem::path& path) {
    std::vector<ReviewDecision> decisions;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("invalid JSON", line);
        ReviewDecision d;
        try {
            d.template_id = j.at("template_id").get<std::string>();
            std::string v = j.at("verdict").get<std::string>();
            if (v == "approve") d.verdict = Verdict::Approve;
            else if (v == "edit") d.verdict = Verdict::Edit;
            else if (v == "reject") d.verdict = Verdict::Reject;
            else throw ParseError("unknown verdict '" + v + "'", line);
            if (j.contains("edited") && !j.at("edited").is_null()) {
                ThoughtTemplate e;
                e.overview = j.at("edited").value("overview", "");
                e.challenge = j.at("edited").at("challenge").get<std::string>();
                for (const auto& s : j.at("edited").at("steps")) e.steps.push_back(s.get<std::string>());
                d.edited = std::move(e);
            }
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(std::string("malformed decision record: ") + e.what(), line);
        }
        if (d.verdict == Verdict::Edit && !d.edited)
            throw ParseError("edit verdict without edited content", line);
        decisions.push_back(std::move(d));
    });
    return decisions;
}

inline void write_decisions(const std::vector<ReviewDecision>& decisions,
                            const std::filesystem::path& path) {
    std::string body;
    for (const ReviewDecision& d : decisions) {
        nlohmann::ordered_json j;
        j["template_id"] = d.template_id;
        j["verdict"] = d.verdict == Verdict::Approve ? "approve"
                       : d.verdict == Verdict::Edit  ? "edit"
                                                     : "reject";
        if (d.edited) {
            j["edited"] = {{"overview", d.edited->overview},
                           {"challenge", d.edited->challenge},
                           {"steps", d.edited->steps}};
        }
        body += j.dump();
        body += '\n';
    }
    write_text_file_atomic(path, body);
}

// Approve -> Approved, Edit -> content replaced and Edited, Reject -> excluded.
// Undecided templates stay Pending and are excluded from the result.
inline std::vector<ThoughtTemplate> review_apply(const std::vector<ThoughtTemplate>& templates,
                                                 const std::vector<ReviewDecision>& decisions) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < templates.size(); ++i) {
        if (templates[i].review != ReviewStatus::Pending)
            throw InvariantViolation("template " + templates[i].id + " is not pending review");
        index[templates[i].id] = i;
    }

    std::vector<std::optional<ThoughtTemplate>> decided(templates.size());
    std::set<std::string> seen;
    for (const ReviewDecision& d : decisions) {
        auto it = index.find(d.template_id);
        if (it == index.end())
            throw UnknownTemplateIdError("decision references unknown template " + d.template_id);
        if (!seen.insert(d.template_id).second)
            throw UnknownTemplateIdError("duplicate decision for template " + d.template_id);
        ThoughtTemplate t = templates[it->second];
        switch (d.verdict) {
            case Verdict::Approve:
                t.review = ReviewStatus::Approved;
                break;
            case Verdict::Edit:
                t.overview = d.edited->overview;
                t.challenge = d.edited->challenge;
                t.steps = d.edited->steps;
                t.review = ReviewStatus::Edited;
                break;
            case Verdict::Reject:
                t.review = ReviewStatus::Rejected;
                break;
        }
        if (t.review != ReviewStatus::Rejected) {
            if (trim(t.challenge).empty() || t.steps.empty())
                throw InvariantViolation("template " + t.id +
                                         " would be emitted with an empty challenge or steps");
            decided[it->second] = std::move(t);
        }
    }

    std::vector<ThoughtTemplate> out;
    for (auto& slot : decided)
        if (slot) out.push_back(std::move(*slot));
    return out;
}

// ---------------------------------------------------------------------------
// Thought SFT dataset

// Target serialization of (challenge, steps); the supervision for generating
// the high-level thought given the problem.
inline std::string serialize_thought_target(const ThoughtTemplate& t) {
    std::string out = "Core challenge: " + t.challenge + "\nReasoning steps:";
    for (std::size_t i = 0; i < t.steps.size(); ++i)
        out += "\n" + std::to_string(i + 1) + ". " + t.steps[i];
    return out;
}

inline std::vector<SftRecord> build_thought_sft(const std::vector<ThoughtTemplate>& templates,
                                                const std::string& instruction) {
    std::vector<SftRecord> records;
    records.reserve(templates.size());
    for (const ThoughtTemplate& t : templates) {
        if (t.review != ReviewStatus::Approved && t.review != ReviewStatus::Edited)
            throw InvariantViolation("template " + t.id + " is " + review_status_name(t.review) +
                                     "; only approved or edited templates may be emitted");
        records.push_back({instruction, t.problem, serialize_thought_target(t)});
    }
    return records;
}

}  // namespace logreasoner
