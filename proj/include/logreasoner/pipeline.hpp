#pragma once
// Pipeline orchestration: one run-config file, stage dependency checks,
// content-hash receipts for resumability, atomic artifact promotion, and a
// per-output-directory lock so one stage runs at a time.

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "logreasoner/core.hpp"
#include "logreasoner/dataset.hpp"
#include "logreasoner/eval.hpp"
#include "logreasoner/gateway.hpp"
#include "logreasoner/prompts.hpp"
#include "logreasoner/stage1.hpp"
#include "logreasoner/stage2.hpp"
#include "logreasoner/util.hpp"

namespace logreasoner {

namespace fs = std::filesystem;

// Stage execution failure; maps to exit code 1 (config problems exit 2).
struct StageError : std::runtime_error {
    explicit StageError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Run configuration

struct Stage1Config {
    fs::path handbook_path;
    fs::path instances_path;
    IngestFilter filter;
    std::size_t budget = 0;
    bool per_source = false;
    double jitter = 1e-6;
    double teacher_temperature = 0.8;
    int max_tokens_rationale = 2048;
    int max_tokens_template = 1024;
    bool configured = false;
};

struct Stage2Config {
    fs::path instances_path;
    double student_temperature = 0.0;
    double teacher_temperature = 0.0;
    int max_tokens = 2048;
    int max_correction_attempts = 3;
    bool configured = false;
};

struct EmitConfig {
    bool mixed = false;
    std::optional<std::uint64_t> shuffle_seed;
};

struct EvalTaskConfig {
    fs::path data_path;                 // records / pairs / instances, by task
    std::optional<fs::path> labels_path;
    fs::path exemplars_path;
    std::size_t window = 20;
    std::optional<std::uint64_t> seed;  // required for log_semantic_matching
    std::optional<std::size_t> max_instances;
    std::string source = "unknown";
};

struct EvalConfig {
    double temperature = 0.0;
    int max_tokens = 1024;
    std::map<TaskKind, EvalTaskConfig> tasks;
};

struct RunConfig {
    fs::path config_dir;
    fs::path output_dir;
    fs::path prompts_dir;
    std::map<std::string, GatewayConfig> endpoints;
    std::map<Role, std::string> roles;
    TaskCatalog catalog = TaskCatalog::defaults();
    Stage1Config stage1;
    Stage2Config stage2;
    EmitConfig emit;
    EvalConfig eval;
};

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& j, const std::string& key,
                                         const std::string& ctx) {
    if (!j.contains(key)) throw ConfigError("missing '" + key + "' in " + ctx);
    return j.at(key);
}

inline fs::path resolve_path(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline fs::path require_existing_file(const fs::path& base, const nlohmann::json& j,
                                      const std::string& key, const std::string& ctx) {
    fs::path path = resolve_path(base, require_key(j, key, ctx).get<std::string>());
    if (!fs::exists(path)) throw ConfigError(ctx + "." + key + " does not exist: " + path.string());
    return path;
}

}  // namespace detail

inline RunConfig load_run_config(const fs::path& config_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(config_path));
    } catch (const std::exception& e) {
        throw ConfigError("cannot parse config " + config_path.string() + ": " + e.what());
    }

    RunConfig cfg;
    cfg.config_dir = fs::absolute(config_path).parent_path();
    cfg.output_dir =
        detail::resolve_path(cfg.config_dir, detail::require_key(j, "output_dir", "config").get<std::string>());
    cfg.prompts_dir =
        detail::resolve_path(cfg.config_dir, detail::require_key(j, "prompts_dir", "config").get<std::string>());
    if (!fs::exists(cfg.prompts_dir))
        throw ConfigError("prompts_dir does not exist: " + cfg.prompts_dir.string());

    for (const auto& [id, ej] : detail::require_key(j, "endpoints", "config").items()) {
        GatewayConfig g;
        g.base_url = detail::require_key(ej, "base_url", "endpoints." + id).get<std::string>();
        g.model = ej.value("model", id);
        g.path_prefix = ej.value("path_prefix", "/v1");
        g.auth_env = ej.value("auth_env", "");
        g.max_retries = ej.value("max_retries", 3);
        g.backoff_base_ms = ej.value("backoff_base_ms", 200);
        g.max_in_flight = ej.value("max_in_flight", 4);
        g.timeout_ms = ej.value("timeout_ms", 30000);
        if (g.max_retries < 0) throw ConfigError("endpoints." + id + ".max_retries must be >= 0");
        if (g.max_in_flight < 1) throw ConfigError("endpoints." + id + ".max_in_flight must be >= 1");
        if (g.backoff_base_ms < 1 || g.timeout_ms < 1)
            throw ConfigError("endpoints." + id + " timing values must be positive");
        cfg.endpoints[id] = std::move(g);
    }
    if (cfg.endpoints.empty()) throw ConfigError("config declares no endpoints");

    // Every run binds all three roles; teacher and student may share an
    // endpoint (self-correction mode).
    const nlohmann::json& roles = detail::require_key(j, "roles", "config");
    for (Role role : {Role::Teacher, Role::Student, Role::Embedder}) {
        std::string id = detail::require_key(roles, role_name(role), "roles").get<std::string>();
        if (!cfg.endpoints.count(id))
            throw ConfigError("roles." + role_name(role) + " references unknown endpoint '" + id + "'");
        cfg.roles[role] = id;
    }

    if (j.contains("tasks")) {
        const nlohmann::json& tasks = j.at("tasks");
        if (tasks.contains("root_cause_analysis") && tasks.at("root_cause_analysis").contains("categories"))
            cfg.catalog.set_rca_categories(
                tasks.at("root_cause_analysis").at("categories").get<std::vector<std::string>>());
        if (tasks.contains("synonyms")) {
            for (const auto& [task_key, table] : tasks.at("synonyms").items()) {
                auto kind = task_from_name(task_key);
                if (!kind) throw ConfigError("tasks.synonyms references unknown task '" + task_key + "'");
                cfg.catalog.add_synonyms(*kind,
                                         table.get<std::map<std::string, std::vector<std::string>>>());
            }
        }
    }

    if (j.contains("stage1")) {
        const nlohmann::json& s = j.at("stage1");
        Stage1Config& s1 = cfg.stage1;
        s1.configured = true;
        s1.handbook_path = detail::require_existing_file(cfg.config_dir, s, "handbook_path", "stage1");
        s1.instances_path = detail::require_existing_file(cfg.config_dir, s, "instances_path", "stage1");
        s1.filter.min_symptom_chars = s.value("min_symptom_chars", 80);
        s1.filter.min_flowchart_steps = s.value("min_flowchart_steps", 3);
        validate_filter(s1.filter);
        s1.budget = detail::require_key(s, "budget", "stage1").get<std::size_t>();
        if (s1.budget == 0) throw ConfigError("stage1.budget must be positive");
        s1.per_source = s.value("per_source", false);
        s1.jitter = s.value("jitter", 1e-6);
        s1.teacher_temperature = s.value("teacher_temperature", 0.8);
        s1.max_tokens_rationale = s.value("max_tokens_rationale", 2048);
        s1.max_tokens_template = s.value("max_tokens_template", 1024);
    }

    if (j.contains("stage2")) {
        const nlohmann::json& s = j.at("stage2");
        Stage2Config& s2 = cfg.stage2;
        s2.configured = true;
        s2.instances_path = detail::require_existing_file(cfg.config_dir, s, "instances_path", "stage2");
        s2.student_temperature = s.value("student_temperature", 0.0);
        s2.teacher_temperature = s.value("teacher_temperature", 0.0);
        s2.max_tokens = s.value("max_tokens", 2048);
        s2.max_correction_attempts = s.value("max_correction_attempts", 3);
        if (s2.max_correction_attempts < 1)
            throw ConfigError("stage2.max_correction_attempts must be positive");
    }

    if (j.contains("emit")) {
        cfg.emit.mixed = j.at("emit").value("mixed", false);
        if (j.at("emit").contains("shuffle_seed"))
            cfg.emit.shuffle_seed = j.at("emit").at("shuffle_seed").get<std::uint64_t>();
        if (cfg.emit.mixed && !cfg.emit.shuffle_seed)
            throw ConfigError("emit.mixed requires emit.shuffle_seed (stochastic stage needs a seed)");
    }

    if (j.contains("eval")) {
        const nlohmann::json& e = j.at("eval");
        cfg.eval.temperature = e.value("temperature", 0.0);
        if (cfg.eval.temperature != 0.0)
            throw ConfigError("eval.temperature must be 0 (evaluation is defined at temperature 0), got " +
                              std::to_string(cfg.eval.temperature));
        cfg.eval.max_tokens = e.value("max_tokens", 1024);
        for (const auto& [task_key, tj] : detail::require_key(e, "tasks", "eval").items()) {
            auto kind = task_from_name(task_key);
            if (!kind) throw ConfigError("eval.tasks references unknown task '" + task_key + "'");
            EvalTaskConfig tc;
            std::string data_key = *kind == TaskKind::AnomalyDetection      ? "records"
                                   : *kind == TaskKind::LogSemanticMatching ? "pairs"
                                                                            : "instances";
            tc.data_path = detail::require_existing_file(cfg.config_dir, tj, data_key, "eval." + task_key);
            if (tj.contains("labels"))
                tc.labels_path =
                    detail::require_existing_file(cfg.config_dir, tj, "labels", "eval." + task_key);
            tc.exemplars_path =
                detail::require_existing_file(cfg.config_dir, tj, "exemplars", "eval." + task_key);
            tc.window = tj.value("window", 20);
            if (tc.window == 0) throw ConfigError("eval." + task_key + ".window must be positive");
            if (tj.contains("seed")) tc.seed = tj.at("seed").get<std::uint64_t>();
            if (*kind == TaskKind::LogSemanticMatching && !tc.seed)
                throw ConfigError("eval.log_semantic_matching requires a seed (negative sampling)");
            if (tj.contains("max_instances"))
                tc.max_instances = tj.at("max_instances").get<std::size_t>();
            tc.source = tj.value("source", tc.data_path.stem().string());
            cfg.eval.tasks[*kind] = std::move(tc);
        }
    }

    return cfg;
}

// ---------------------------------------------------------------------------
// Stage lock: one pipeline stage at a time per output directory.

class StageLock {
  public:
    explicit StageLock(const fs::path& out_dir) : path_(out_dir / ".logreasoner.lock") {
        fs::create_directories(out_dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw StageError("another stage appears to be running (lock file exists: " + path_.string() +
                             "); remove it if stale");
        std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
    }
    ~StageLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    StageLock(const StageLock&) = delete;
    StageLock& operator=(const StageLock&) = delete;

  private:
    fs::path path_;
    int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Receipts

struct StageReceipt {
    std::string stage;
    std::string params_hash;
    std::map<std::string, std::string> inputs;     // resolved path -> sha256
    std::map<std::string, std::string> templates;  // template name -> sha256
    std::map<std::string, std::string> outputs;    // path relative to out dir -> sha256
    nlohmann::ordered_json counts;
};

inline nlohmann::ordered_json receipt_to_json(const StageReceipt& r) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["params_hash"] = r.params_hash;
    j["inputs"] = r.inputs;
    j["templates"] = r.templates;
    j["outputs"] = r.outputs;
    j["counts"] = r.counts;
    return j;
}

struct StageOptions {
    std::optional<fs::path> decisions_path;  // review: apply a decisions file
    bool approve_all = false;                // review: approve every pending template
    bool interactive = false;                // review: terminal prompt loop
    std::optional<TaskKind> eval_task;       // eval: restrict to one task
    std::istream* in = &std::cin;
    std::ostream* out = &std::cout;
};

class Pipeline {
  public:
    Pipeline(RunConfig config, std::shared_ptr<Transport> transport,
             std::optional<fs::path> mock_script_path = std::nullopt)
        : cfg_(std::move(config)),
          store_(cfg_.prompts_dir),
          gateway_(cfg_.endpoints, std::move(transport)),
          mock_script_path_(std::move(mock_script_path)) {}

    const RunConfig& config() const { return cfg_; }
    const PromptStore& prompts() const { return store_; }
    const Gateway& gateway() const { return gateway_; }

    // Runs one stage; returns true when work was done, false for an
    // up-to-date no-op. Throws StageError / ConfigError on failure.
    bool run(const std::string& stage, const StageOptions& opt = {}) {
        StageLock lock(cfg_.output_dir);
        if (stage == "ingest") return run_ingest();
        if (stage == "rationales") return run_rationales();
        if (stage == "select") return run_select();
        if (stage == "distill") return run_distill();
        if (stage == "review") return run_review(opt);
        if (stage == "generate") return run_generate();
        if (stage == "calibrate") return run_calibrate();
        if (stage == "emit") return run_emit();
        if (stage == "eval") return run_eval_stage(opt);
        if (stage == "stats") return run_stats();
        throw ConfigError("unknown stage '" + stage + "'");
    }

    static const std::vector<std::string>& stage_names() {
        static const std::vector<std::string> names = {"ingest",   "rationales", "select", "distill",
                                                       "review",   "generate",   "calibrate", "emit",
                                                       "eval",     "stats"};
        return names;
    }

  private:
    fs::path out(const std::string& rel) const { return cfg_.output_dir / rel; }
    fs::path receipt_path(const std::string& stage) const {
        return out("receipts/" + stage + ".json");
    }

    ModelRole role(Role r) const { return ModelRole{r, cfg_.roles.at(r)}; }

    void require_stage1_config() const {
        if (!cfg_.stage1.configured) throw ConfigError("config has no 'stage1' section");
    }
    void require_stage2_config() const {
        if (!cfg_.stage2.configured) throw ConfigError("config has no 'stage2' section");
    }

    void require_deps(const std::string& stage, const std::vector<std::string>& deps) const {
        for (const std::string& dep : deps) {
            if (!fs::exists(receipt_path(dep)))
                throw StageError("stage '" + stage + "' requires '" + dep +
                                 "' to have completed; run `logreasoner " + dep + "` first");
        }
    }

    std::map<std::string, std::string> hash_inputs(const std::vector<fs::path>& paths,
                                                   bool with_mock_script) const {
        std::map<std::string, std::string> hashes;
        for (const fs::path& p : paths) hashes[p.string()] = sha256_file(p);
        if (with_mock_script && mock_script_path_)
            hashes[mock_script_path_->string()] = sha256_file(*mock_script_path_);
        return hashes;
    }

    std::map<std::string, std::string> hash_templates() const {
        std::map<std::string, std::string> hashes;
        for (const auto& entry : fs::directory_iterator(cfg_.prompts_dir)) {
            if (entry.path().extension() != ".txt") continue;
            hashes[entry.path().stem().string()] = sha256_file(entry.path());
        }
        return hashes;
    }

    // A stage is a no-op when its previous receipt recorded the same inputs,
    // params and templates, and every output still matches its hash.
    bool up_to_date(const StageReceipt& draft) const {
        fs::path rp = receipt_path(draft.stage);
        if (!fs::exists(rp)) return false;
        nlohmann::json prev;
        try {
            prev = nlohmann::json::parse(read_text_file(rp));
        } catch (const std::exception&) {
            return false;
        }
        if (prev.value("params_hash", "") != draft.params_hash) return false;
        if (prev.value("inputs", nlohmann::json::object()) != nlohmann::json(draft.inputs)) return false;
        if (prev.value("templates", nlohmann::json::object()) != nlohmann::json(draft.templates))
            return false;
        if (!prev.contains("outputs")) return false;
        for (const auto& [rel, hash] : prev.at("outputs").items()) {
            fs::path p = out(rel);
            if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
        }
        return true;
    }

    void finish(StageReceipt& receipt, const std::vector<std::string>& output_rels) {
        for (const std::string& rel : output_rels) receipt.outputs[rel] = sha256_file(out(rel));
        write_text_file_atomic(receipt_path(receipt.stage), receipt_to_json(receipt).dump(2) + "\n");
        std::cout << "[" << receipt.stage << "] done " << receipt.counts.dump() << "\n";
    }

    static std::string params_hash_of(const nlohmann::ordered_json& params) {
        return sha256_hex(params.dump());
    }

    // -- ingest ------------------------------------------------------------

    bool run_ingest() {
        require_stage1_config();
        StageReceipt receipt;
        receipt.stage = "ingest";
        receipt.inputs = hash_inputs({cfg_.stage1.handbook_path}, false);
        receipt.params_hash = params_hash_of({{"min_symptom_chars", cfg_.stage1.filter.min_symptom_chars},
                                              {"min_flowchart_steps", cfg_.stage1.filter.min_flowchart_steps}});
        if (up_to_date(receipt)) return uptodate("ingest");

        IngestResult result = ingest_handbook_cases(cfg_.stage1.handbook_path, cfg_.stage1.filter);
        write_cases(result.cases, out("stage1/handbook_cases.jsonl"));
        receipt.counts = {{"ingested", result.cases.size()},
                          {"dropped_short_symptom", result.dropped_short_symptom},
                          {"dropped_few_steps", result.dropped_few_steps}};
        finish(receipt, {"stage1/handbook_cases.jsonl"});
        return true;
    }

    // -- rationales ----------------------------------------------------------

    bool run_rationales() {
        require_stage1_config();
        StageReceipt receipt;
        receipt.stage = "rationales";
        receipt.inputs = hash_inputs({cfg_.stage1.instances_path}, true);
        receipt.templates = hash_templates();
        receipt.params_hash = params_hash_of({{"teacher", cfg_.roles.at(Role::Teacher)},
                                              {"temperature", cfg_.stage1.teacher_temperature},
                                              {"max_tokens", cfg_.stage1.max_tokens_rationale}});
        if (up_to_date(receipt)) return uptodate("rationales");

        auto instances = load_task_instances(cfg_.stage1.instances_path, cfg_.catalog);
        RationaleResult result =
            generate_rationales(gateway_, role(Role::Teacher), store_, cfg_.catalog, instances,
                                cfg_.stage1.teacher_temperature, cfg_.stage1.max_tokens_rationale);
        write_cases(result.cases, out("stage1/rationale_cases.jsonl"));
        receipt.counts = {{"instances", instances.size()},
                          {"retained", result.cases.size()},
                          {"rejected_wrong_answer", result.rejected_wrong_answer},
                          {"gateway_errors", result.gateway_errors}};
        finish(receipt, {"stage1/rationale_cases.jsonl"});
        return true;
    }

    // -- select --------------------------------------------------------------

    bool run_select() {
        require_stage1_config();
        require_deps("select", {"ingest", "rationales"});
        StageReceipt receipt;
        receipt.stage = "select";
        receipt.inputs =
            hash_inputs({out("stage1/handbook_cases.jsonl"), out("stage1/rationale_cases.jsonl")}, true);
        receipt.params_hash = params_hash_of({{"budget", cfg_.stage1.budget},
                                              {"per_source", cfg_.stage1.per_source},
                                              {"jitter", cfg_.stage1.jitter},
                                              {"embedder", cfg_.roles.at(Role::Embedder)}});
        if (up_to_date(receipt)) return uptodate("select");

        std::vector<AnalysisCase> pool = read_cases(out("stage1/handbook_cases.jsonl"));
        std::vector<AnalysisCase> rationales = read_cases(out("stage1/rationale_cases.jsonl"));
        pool.insert(pool.end(), rationales.begin(), rationales.end());
        if (cfg_.stage1.budget > pool.size())
            throw StageError("stage1.budget " + std::to_string(cfg_.stage1.budget) +
                             " exceeds pooled case count " + std::to_string(pool.size()));
        std::vector<AnalysisCase> selected =
            semantic_filter(gateway_, role(Role::Embedder), pool, cfg_.stage1.budget, cfg_.stage1.jitter,
                            cfg_.stage1.per_source);
        write_cases(selected, out("stage1/selected_cases.jsonl"));
        receipt.counts = {{"pool", pool.size()}, {"selected", selected.size()}};
        finish(receipt, {"stage1/selected_cases.jsonl"});
        return true;
    }

    // -- distill -------------------------------------------------------------

    bool run_distill() {
        require_stage1_config();
        require_deps("distill", {"select"});
        StageReceipt receipt;
        receipt.stage = "distill";
        receipt.inputs = hash_inputs({out("stage1/selected_cases.jsonl")}, true);
        receipt.templates = hash_templates();
        receipt.params_hash = params_hash_of({{"teacher", cfg_.roles.at(Role::Teacher)},
                                              {"temperature", cfg_.stage1.teacher_temperature},
                                              {"max_tokens", cfg_.stage1.max_tokens_template}});
        if (up_to_date(receipt)) return uptodate("distill");

        std::vector<AnalysisCase> cases = read_cases(out("stage1/selected_cases.jsonl"));
        DistillResult result = distill_templates(gateway_, role(Role::Teacher), store_, cases,
                                                 cfg_.stage1.teacher_temperature,
                                                 cfg_.stage1.max_tokens_template);
        write_templates(result.templates, out("stage1/templates_pending.jsonl"), true);
        write_templates(result.templates, out("stage1/review_queue.jsonl"), false);
        receipt.counts = {{"cases", cases.size()},
                          {"distilled", result.templates.size()},
                          {"unparsed", result.unparsed_ids.size()}};
        finish(receipt, {"stage1/templates_pending.jsonl", "stage1/review_queue.jsonl"});
        return true;
    }

    // -- review --------------------------------------------------------------

    bool run_review(const StageOptions& opt) {
        require_deps("review", {"distill"});
        std::string mode = opt.decisions_path ? "decisions" : opt.approve_all ? "approve_all" : "interactive";

        StageReceipt receipt;
        receipt.stage = "review";
        std::vector<fs::path> inputs = {out("stage1/templates_pending.jsonl")};
        if (opt.decisions_path) {
            if (!fs::exists(*opt.decisions_path))
                throw ConfigError("decisions file does not exist: " + opt.decisions_path->string());
            inputs.push_back(*opt.decisions_path);
        }
        receipt.inputs = hash_inputs(inputs, false);
        receipt.params_hash = params_hash_of({{"mode", mode}});
        // Interactive runs always re-prompt; file-driven runs are resumable.
        if (mode != "interactive" && up_to_date(receipt)) return uptodate("review");

        std::vector<ThoughtTemplate> templates = read_templates(out("stage1/templates_pending.jsonl"));
        std::vector<ReviewDecision> decisions;
        if (opt.decisions_path) {
            decisions = read_decisions(*opt.decisions_path);
        } else if (opt.approve_all) {
            for (const ThoughtTemplate& t : templates)
                decisions.push_back({t.id, Verdict::Approve, std::nullopt});
        } else {
            decisions = interactive_review(templates, *opt.in, *opt.out);
        }

        std::vector<ThoughtTemplate> finals = review_apply(templates, decisions);
        write_decisions(decisions, out("stage1/decisions_applied.jsonl"));
        write_templates(finals, out("stage1/templates_final.jsonl"), true);
        std::size_t approved = 0, edited = 0, rejected = 0;
        for (const ThoughtTemplate& t : finals) {
            if (t.review == ReviewStatus::Approved) ++approved;
            if (t.review == ReviewStatus::Edited) ++edited;
        }
        for (const ReviewDecision& d : decisions)
            if (d.verdict == Verdict::Reject) ++rejected;
        receipt.counts = {{"pending", templates.size()},
                          {"approved", approved},
                          {"edited", edited},
                          {"rejected", rejected},
                          {"undecided", templates.size() - decisions.size()}};
        finish(receipt, {"stage1/decisions_applied.jsonl", "stage1/templates_final.jsonl"});
        return true;
    }

    static std::vector<ReviewDecision> interactive_review(const std::vector<ThoughtTemplate>& templates,
                                                          std::istream& in, std::ostream& os) {
        std::vector<ReviewDecision> decisions;
        for (std::size_t i = 0; i < templates.size(); ++i) {
            const ThoughtTemplate& t = templates[i];
            os << "\n[" << (i + 1) << "/" << templates.size() << "] " << t.id << "\n"
               << "problem:   " << t.problem << "\n"
               << "overview:  " << t.overview << "\n"
               << "challenge: " << t.challenge << "\n"
               << "steps:\n";
            for (std::size_t s = 0; s < t.steps.size(); ++s)
                os << "  " << (s + 1) << ". " << t.steps[s] << "\n";
            os << "[a]pprove / [e]dit / [r]eject / [s]kip / [q]uit > " << std::flush;

            std::string line;
            if (!std::getline(in, line)) break;
            std::string cmd = to_lower(trim(line));
            if (cmd == "q" || cmd == "quit") break;
            if (cmd == "s" || cmd == "skip" || cmd.empty()) continue;
            if (cmd == "a" || cmd == "approve") {
                decisions.push_back({t.id, Verdict::Approve, std::nullopt});
            } else if (cmd == "r" || cmd == "reject") {
                decisions.push_back({t.id, Verdict::Reject, std::nullopt});
            } else if (cmd == "e" || cmd == "edit") {
                ThoughtTemplate edited;
                os << "overview (empty keeps current):\n> " << std::flush;
                std::getline(in, line);
                edited.overview = trim(line).empty() ? t.overview : trim(line);
                os << "challenge (empty keeps current):\n> " << std::flush;
                std::getline(in, line);
                edited.challenge = trim(line).empty() ? t.challenge : trim(line);
                os << "steps, one per line, empty line ends (no lines keeps current):\n" << std::flush;
                std::vector<std::string> steps;
                while (std::getline(in, line) && !trim(line).empty()) steps.push_back(trim(line));
                edited.steps = steps.empty() ? t.steps : steps;
                decisions.push_back({t.id, Verdict::Edit, std::move(edited)});
            } else {
                os << "unrecognized input, skipping template\n";
            }
        }
        return decisions;
    }

    // -- generate ------------------------------------------------------------

    bool run_generate() {
        require_stage2_config();
        require_deps("generate", {"review"});
        StageReceipt receipt;
        receipt.stage = "generate";
        receipt.inputs = hash_inputs({cfg_.stage2.instances_path}, true);
        receipt.templates = hash_templates();
        receipt.params_hash = params_hash_of({{"student", cfg_.roles.at(Role::Student)},
                                              {"temperature", cfg_.stage2.student_temperature},
                                              {"max_tokens", cfg_.stage2.max_tokens}});
        if (up_to_date(receipt)) return uptodate("generate");

        auto instances = load_task_instances(cfg_.stage2.instances_path, cfg_.catalog);
        std::vector<Trajectory> trajectories =
            generate_trajectories(gateway_, role(Role::Student), store_, cfg_.catalog, instances,
                                  cfg_.stage2.student_temperature, cfg_.stage2.max_tokens);

        std::vector<std::pair<TaskInstance, Trajectory>> items;
        items.reserve(instances.size());
        for (std::size_t i = 0; i < instances.size(); ++i)
            items.emplace_back(instances[i], trajectories[i]);
        Partition partition = partition_trajectories(items);

        std::map<std::string, std::string> disposition;
        for (const auto& [inst, traj] : partition.correct) disposition[inst.id] = "correct";
        for (const auto& [inst, traj] : partition.erroneous) disposition[inst.id] = "erroneous";
        std::vector<TrajectoryRecord> records;
        records.reserve(items.size());
        for (const auto& [inst, traj] : items)
            records.push_back({inst.id, inst.task, traj, disposition.at(inst.id)});
        write_trajectory_records(records, out("stage2/trajectories.jsonl"));

        nlohmann::ordered_json by_task = nlohmann::ordered_json::object();
        for (const auto& [key, counts] : partition_counts(partition)) {
            by_task[key.first + "/" + key.second] = {{"correct", counts.correct},
                                                     {"erroneous", counts.erroneous}};
        }
        receipt.counts = {{"instances", instances.size()},
                          {"correct", partition.correct.size()},
                          {"erroneous", partition.erroneous.size()},
                          {"by_task_source", by_task}};
        finish(receipt, {"stage2/trajectories.jsonl"});
        return true;
    }

    // -- calibrate -----------------------------------------------------------

    bool run_calibrate() {
        require_stage2_config();
        require_deps("calibrate", {"generate"});
        StageReceipt receipt;
        receipt.stage = "calibrate";
        receipt.inputs = hash_inputs({out("stage2/trajectories.jsonl"), cfg_.stage2.instances_path}, true);
        receipt.templates = hash_templates();
        receipt.params_hash = params_hash_of({{"teacher", cfg_.roles.at(Role::Teacher)},
                                              {"temperature", cfg_.stage2.teacher_temperature},
                                              {"max_tokens", cfg_.stage2.max_tokens},
                                              {"max_attempts", cfg_.stage2.max_correction_attempts}});
        if (up_to_date(receipt)) return uptodate("calibrate");

        auto instances = load_task_instances(cfg_.stage2.instances_path, cfg_.catalog);
        std::map<std::string, const TaskInstance*> by_id;
        for (const TaskInstance& inst : instances) by_id[inst.id] = &inst;

        std::vector<std::pair<TaskInstance, Trajectory>> erroneous;
        for (const TrajectoryRecord& r :
             read_trajectory_records(out("stage2/trajectories.jsonl"), cfg_.catalog)) {
            if (r.disposition != "erroneous") continue;
            auto it = by_id.find(r.instance_id);
            if (it == by_id.end())
                throw StageError("trajectory references unknown instance " + r.instance_id);
            erroneous.emplace_back(*it->second, r.trajectory);
        }

        CorrectionRun run = correct_trajectories(gateway_, role(Role::Teacher), store_, cfg_.catalog,
                                                 erroneous, cfg_.stage2.max_correction_attempts,
                                                 cfg_.stage2.teacher_temperature, cfg_.stage2.max_tokens);

        std::string body;
        for (const CorrectedItem& item : run.corrected) {
            nlohmann::ordered_json j;
            j["instance_id"] = item.instance.id;
            j["first_error_index"] = item.result.first_error_index;
            j["reflection"] = item.result.reflection;
            j["corrected"] = {{"steps", item.result.corrected.steps},
                              {"answer", item.result.corrected.answer->value},
                              {"raw", item.result.corrected.raw}};
            j["disposition"] = "corrected";
            body += j.dump();
            body += '\n';
        }
        for (const auto& [id, reason] : run.dropped) {
            nlohmann::ordered_json j;
            j["instance_id"] = id;
            j["disposition"] = "dropped";
            j["reason"] = reason;
            body += j.dump();
            body += '\n';
        }
        write_text_file_atomic(out("stage2/corrections.jsonl"), body);
        receipt.counts = {{"erroneous", erroneous.size()},
                          {"corrected", run.corrected.size()},
                          {"dropped", run.dropped.size()}};
        finish(receipt, {"stage2/corrections.jsonl"});
        return true;
    }

    // -- emit ----------------------------------------------------------------

    struct CorrectionFileEntry {
        std::string instance_id;
        std::size_t first_error_index = 0;
        std::string reflection;
        std::vector<std::string> steps;
        std::string answer;
        std::string raw;
    };

    bool run_emit() {
        require_stage2_config();
        require_deps("emit", {"review", "calibrate"});
        StageReceipt receipt;
        receipt.stage = "emit";
        receipt.inputs = hash_inputs({out("stage1/templates_final.jsonl"), out("stage2/trajectories.jsonl"),
                                      out("stage2/corrections.jsonl"), cfg_.stage2.instances_path},
                                     false);
        receipt.templates = hash_templates();
        nlohmann::ordered_json params = {{"mixed", cfg_.emit.mixed}};
        if (cfg_.emit.shuffle_seed) params["shuffle_seed"] = *cfg_.emit.shuffle_seed;
        receipt.params_hash = params_hash_of(params);
        if (up_to_date(receipt)) return uptodate("emit");

        std::vector<std::string> outputs;
        nlohmann::ordered_json counts = nlohmann::ordered_json::object();

        // Thought SFT from reviewed templates.
        std::vector<ThoughtTemplate> finals = read_templates(out("stage1/templates_final.jsonl"));
        std::vector<SftRecord> thought_records =
            build_thought_sft(finals, trim(store_.text("thought_sft_instruction")));
        emit_sft(thought_records, out("datasets/thought_sft.jsonl"),
                 {TrainStage::ThoughtSFT, "mixed", "mixed"});
        outputs.push_back("datasets/thought_sft.jsonl");
        outputs.push_back("datasets/thought_sft.jsonl.manifest.json");
        counts["thought_sft"] = thought_records.size();

        // Solution SFT and DPO per task.
        auto instances = load_task_instances(cfg_.stage2.instances_path, cfg_.catalog);
        std::map<std::string, const TaskInstance*> by_id;
        for (const TaskInstance& inst : instances) by_id[inst.id] = &inst;

        auto records = read_trajectory_records(out("stage2/trajectories.jsonl"), cfg_.catalog);
        std::map<TaskKind, std::vector<std::pair<TaskInstance, Trajectory>>> correct_by_task;
        std::map<std::string, Trajectory> erroneous_by_id;
        for (const TrajectoryRecord& r : records) {
            auto it = by_id.find(r.instance_id);
            if (it == by_id.end())
                throw StageError("trajectory references unknown instance " + r.instance_id);
            if (r.disposition == "correct") correct_by_task[r.task].emplace_back(*it->second, r.trajectory);
            else if (r.disposition == "erroneous") erroneous_by_id[r.instance_id] = r.trajectory;
        }

        std::map<TaskKind, std::vector<CorrectedItem>> corrected_by_task;
        for_each_jsonl_line(out("stage2/corrections.jsonl"), [&](std::size_t line, std::string_view text) {
            nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
            if (j.is_discarded()) throw ParseError("invalid JSON", line);
            if (j.at("disposition").get<std::string>() != "corrected") return;
            std::string id = j.at("instance_id").get<std::string>();
            auto inst_it = by_id.find(id);
            auto rej_it = erroneous_by_id.find(id);
            if (inst_it == by_id.end() || rej_it == erroneous_by_id.end())
                throw StageError("correction references unknown erroneous instance " + id);
            CorrectedItem item;
            item.instance = *inst_it->second;
            item.rejected = rej_it->second;
            item.result.first_error_index = j.at("first_error_index").get<std::size_t>();
            item.result.reflection = j.value("reflection", "");
            for (const auto& s : j.at("corrected").at("steps"))
                item.result.corrected.steps.push_back(s.get<std::string>());
            auto answer = cfg_.catalog.canonicalize(item.instance.task,
                                                    j.at("corrected").at("answer").get<std::string>());
            if (!answer) throw StageError("correction for " + id + " has an invalid answer");
            item.result.corrected.answer = answer;
            item.result.corrected.raw = j.at("corrected").at("raw").get<std::string>();
            item.result.corrected.parse_ok = true;
            corrected_by_task[item.instance.task].push_back(std::move(item));
        });

        auto source_domain_of = [](std::vector<std::string> sources) {
            std::sort(sources.begin(), sources.end());
            sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
            std::string joined;
            for (std::size_t i = 0; i < sources.size(); ++i) {
                if (i) joined += "+";
                joined += sources[i];
            }
            return joined.empty() ? std::string("unknown") : joined;
        };

        std::vector<SftRecord> mixed_sft;
        std::vector<DpoRecord> mixed_dpo;
        for (TaskKind task : kAllTasks) {
            std::string name = task_name(task);
            if (correct_by_task.count(task)) {
                auto& correct = correct_by_task[task];
                std::sort(correct.begin(), correct.end(),
                          [](const auto& a, const auto& b) { return a.first.id < b.first.id; });
                std::vector<std::string> sources;
                for (const auto& [inst, traj] : correct) sources.push_back(inst.source);
                auto sft = to_solution_sft_records(correct, store_, cfg_.catalog);
                emit_sft(sft, out("datasets/solution_sft_" + name + ".jsonl"),
                         {TrainStage::SolutionSFT, name, source_domain_of(sources)});
                outputs.push_back("datasets/solution_sft_" + name + ".jsonl");
                outputs.push_back("datasets/solution_sft_" + name + ".jsonl.manifest.json");
                counts["solution_sft_" + name] = sft.size();
                mixed_sft.insert(mixed_sft.end(), sft.begin(), sft.end());
            }
            if (corrected_by_task.count(task)) {
                auto& corrected = corrected_by_task[task];
                std::sort(corrected.begin(), corrected.end(),
                          [](const auto& a, const auto& b) { return a.instance.id < b.instance.id; });
                std::vector<std::string> sources;
                for (const CorrectedItem& item : corrected) sources.push_back(item.instance.source);
                std::vector<PreferencePair> pairs = build_pref_pairs(corrected);
                auto dpo = to_dpo_records(pairs, store_, cfg_.catalog);
                emit_dpo(dpo, out("datasets/dpo_" + name + ".jsonl"),
                         {TrainStage::DPO, name, source_domain_of(sources)});
                outputs.push_back("datasets/dpo_" + name + ".jsonl");
                outputs.push_back("datasets/dpo_" + name + ".jsonl.manifest.json");
                counts["dpo_" + name] = dpo.size();
                mixed_dpo.insert(mixed_dpo.end(), dpo.begin(), dpo.end());
            }
        }

        // Mixed-task training files: concat in task order, then a seeded shuffle.
        if (cfg_.emit.mixed) {
            Rng sft_rng(*cfg_.emit.shuffle_seed);
            Rng dpo_rng(*cfg_.emit.shuffle_seed ^ 0x9e3779b97f4a7c15ull);
            shuffle(mixed_sft, sft_rng);
            shuffle(mixed_dpo, dpo_rng);
            emit_sft(mixed_sft, out("datasets/solution_sft_mixed.jsonl"),
                     {TrainStage::SolutionSFT, "mixed", "mixed"});
            emit_dpo(mixed_dpo, out("datasets/dpo_mixed.jsonl"), {TrainStage::DPO, "mixed", "mixed"});
            outputs.push_back("datasets/solution_sft_mixed.jsonl");
            outputs.push_back("datasets/solution_sft_mixed.jsonl.manifest.json");
            outputs.push_back("datasets/dpo_mixed.jsonl");
            outputs.push_back("datasets/dpo_mixed.jsonl.manifest.json");
            counts["solution_sft_mixed"] = mixed_sft.size();
            counts["dpo_mixed"] = mixed_dpo.size();
        }

        receipt.counts = std::move(counts);
        finish(receipt, outputs);
        return true;
    }

    // -- eval ----------------------------------------------------------------

    bool run_eval_stage(const StageOptions& opt) {
        if (cfg_.eval.tasks.empty()) throw ConfigError("config has no 'eval.tasks' section");
        bool ran_any = false;
        for (const auto& [task, tc] : cfg_.eval.tasks) {
            if (opt.eval_task && *opt.eval_task != task) continue;
            ran_any = true;
            run_eval_task(task, tc);
        }
        if (!ran_any) throw ConfigError("eval task not configured: " + task_name(*opt.eval_task));
        return true;
    }

    void run_eval_task(TaskKind task, const EvalTaskConfig& tc) {
        std::string name = task_name(task);
        StageReceipt receipt;
        receipt.stage = "eval_" + name;
        std::vector<fs::path> inputs = {tc.data_path, tc.exemplars_path};
        if (tc.labels_path) inputs.push_back(*tc.labels_path);
        receipt.inputs = hash_inputs(inputs, true);
        receipt.templates = hash_templates();
        nlohmann::ordered_json params = {{"student", cfg_.roles.at(Role::Student)},
                                         {"temperature", cfg_.eval.temperature},
                                         {"max_tokens", cfg_.eval.max_tokens},
                                         {"window", tc.window},
                                         {"source", tc.source}};
        if (tc.seed) params["seed"] = *tc.seed;
        if (tc.max_instances) params["max_instances"] = *tc.max_instances;
        receipt.params_hash = params_hash_of(params);
        if (up_to_date(receipt)) {
            uptodate(receipt.stage);
            return;
        }

        std::vector<TaskInstance> instances;
        switch (task) {
            case TaskKind::AnomalyDetection: {
                auto records = load_log_records(tc.data_path, tc.labels_path, tc.source);
                instances = sessions_to_instances(sessionize(records, tc.window), tc.source);
                break;
            }
            case TaskKind::LogSemanticMatching:
                instances = build_lsm_instances(load_lsm_pairs(tc.data_path), *tc.seed, tc.source);
                break;
            default: {
                instances = load_task_instances(tc.data_path, cfg_.catalog);
                for (const TaskInstance& inst : instances)
                    if (inst.task != task)
                        throw StageError("eval." + name + " instances contain task " +
                                         task_name(inst.task));
                break;
            }
        }
        if (tc.max_instances && instances.size() > *tc.max_instances)
            instances.resize(*tc.max_instances);

        auto exemplars = load_exemplars(tc.exemplars_path, cfg_.catalog, task);
        EvalRun run = logreasoner::run_eval(gateway_, store_, cfg_.catalog, task, instances, exemplars,
                                            cfg_.roles.at(Role::Student), cfg_.eval.max_tokens);
        write_eval_report(run, out("eval/" + name + "_report.json"), out("eval/" + name + "_report.txt"));

        std::size_t nomatch = 0;
        for (const auto& [id, pred] : run.predictions) nomatch += pred ? 0 : 1;
        receipt.counts = {{"instances", instances.size()},
                          {"nomatch", nomatch},
                          {"accuracy", run.metrics.accuracy},
                          {"f1", run.metrics.f1},
                          {"weighted_f1", run.metrics.weighted_f1}};
        finish(receipt, {"eval/" + name + "_report.json", "eval/" + name + "_report.txt"});
    }

    // -- stats ---------------------------------------------------------------

    bool run_stats() {
        require_deps("stats", {"emit"});
        StageReceipt receipt;
        receipt.stage = "stats";
        std::vector<fs::path> manifest_paths;
        for (const auto& entry : fs::directory_iterator(out("datasets"))) {
            const std::string name = entry.path().filename().string();
            if (name.size() > 14 && name.substr(name.size() - 14) == ".manifest.json")
                manifest_paths.push_back(entry.path());
        }
        std::sort(manifest_paths.begin(), manifest_paths.end());
        receipt.inputs = hash_inputs(manifest_paths, false);
        receipt.params_hash = params_hash_of(nlohmann::ordered_json::object());
        if (up_to_date(receipt)) return uptodate("stats");

        std::vector<TrainingManifest> manifests;
        for (const fs::path& p : manifest_paths) manifests.push_back(read_manifest(p));
        StatsTable table = stats(manifests);
        write_text_file_atomic(out("stats.json"), table.to_json().dump(2) + "\n");
        write_text_file_atomic(out("stats.txt"), table.to_text());
        std::cout << table.to_text();
        receipt.counts = {{"manifests", manifests.size()}, {"rows", table.rows.size()}};
        finish(receipt, {"stats.json", "stats.txt"});
        return true;
    }

    static bool uptodate(const std::string& stage) {
        std::cout << "[" << stage << "] up-to-date, skipping\n";
        return false;
    }

    RunConfig cfg_;
    PromptStore store_;
    Gateway gateway_;
    std::optional<fs::path> mock_script_path_;
};

}  // namespace logreasoner
