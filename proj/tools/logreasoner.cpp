// Command-line front end for the pipeline: one subcommand per stage over a
// single run-config file. Exit codes: 0 success, 1 stage failure, 2 invalid
// config. Failures print machine-readable JSON on stderr.

#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "logreasoner/pipeline.hpp"

namespace {

int fail(const std::string& stage, const std::string& kind, const std::string& message, int code) {
    nlohmann::ordered_json j;
    j["error"] = {{"stage", stage}, {"kind", kind}, {"message", message}};
    std::cerr << j.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace logreasoner;

    CLI::App app{"logreasoner: coarse-to-fine reasoning-enhancement data pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string mock_script;
    app.add_option("-c,--config", config_path, "run-config JSON file")->required();
    app.add_option("--mock-script", mock_script,
                   "scripted mock responder JSON; routes all endpoint traffic in-process");

    std::string decisions_path;
    bool approve_all = false;
    std::string eval_task;

    for (const std::string& name : Pipeline::stage_names()) {
        CLI::App* sub = app.add_subcommand(name, "run the '" + name + "' stage");
        if (name == "review") {
            sub->add_option("--decisions", decisions_path,
                            "apply a decisions JSONL file instead of prompting");
            sub->add_flag("--approve-all", approve_all, "approve every pending template");
        }
        if (name == "eval") {
            sub->add_option("--task", eval_task, "restrict evaluation to one task");
        }
    }

    CLI11_PARSE(app, argc, argv);
    const std::string stage = app.get_subcommands().front()->get_name();

    RunConfig config;
    std::shared_ptr<Transport> transport;
    std::optional<std::filesystem::path> script_path;
    try {
        config = load_run_config(config_path);
        if (!mock_script.empty()) {
            script_path = std::filesystem::path(mock_script);
            transport = MockTransport::from_file(*script_path);
        } else {
            transport = std::make_shared<HttpTransport>();
        }
    } catch (const std::exception& e) {
        return fail(stage, "config", e.what(), 2);
    }

    StageOptions options;
    if (!decisions_path.empty()) options.decisions_path = decisions_path;
    options.approve_all = approve_all;
    if (approve_all && !decisions_path.empty())
        return fail(stage, "config", "--decisions and --approve-all are mutually exclusive", 2);
    if (!eval_task.empty()) {
        auto task = task_from_name(eval_task);
        if (!task) return fail(stage, "config", "unknown task '" + eval_task + "'", 2);
        options.eval_task = task;
    }

    try {
        Pipeline pipeline(std::move(config), std::move(transport), script_path);
        pipeline.run(stage, options);
        return 0;
    } catch (const ConfigError& e) {
        return fail(stage, "config", e.what(), 2);
    } catch (const std::exception& e) {
        return fail(stage, "stage", e.what(), 1);
    }
}
