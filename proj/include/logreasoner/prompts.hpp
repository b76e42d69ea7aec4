#pragma once
// Versioned prompt templates loaded from files and rendered by placeholder
// substitution, so a pipeline run is reproducible byte-for-byte.

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "logreasoner/core.hpp"
#include "logreasoner/util.hpp"

namespace logreasoner {

struct TemplateError : std::runtime_error {
    explicit TemplateError(const std::string& what) : std::runtime_error(what) {}
};

// Substitutes {{name}} placeholders. Every placeholder must have a value;
// a typo in either the template or the variable map is a hard error.
inline std::string render_template(const std::string& tpl,
                                   const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tpl.size());
    std::size_t pos = 0;
    while (pos < tpl.size()) {
        std::size_t open = tpl.find("{{", pos);
        if (open == std::string::npos) {
            out.append(tpl, pos, std::string::npos);
            break;
        }
        out.append(tpl, pos, open - pos);
        std::size_t close = tpl.find("}}", open + 2);
        if (close == std::string::npos) throw TemplateError("unterminated {{ placeholder");
        std::string name = trim(tpl.substr(open + 2, close - open - 2));
        auto it = vars.find(name);
        if (it == vars.end()) throw TemplateError("no value for placeholder {{" + name + "}}");
        out.append(it->second);
        pos = close + 2;
    }
    return out;
}

class PromptStore {
  public:
    explicit PromptStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

    const std::string& text(const std::string& name) const {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second.text;
        std::filesystem::path path = dir_ / (name + ".txt");
        Entry entry;
        entry.text = read_text_file(path);
        entry.version = sha256_hex(entry.text);
        return cache_.emplace(name, std::move(entry)).first->second.text;
    }

    // Content hash of the template file; recorded in stage receipts.
    std::string version(const std::string& name) const {
        text(name);
        return cache_.at(name).version;
    }

    std::string render(const std::string& name, const std::map<std::string, std::string>& vars) const {
        try {
            return render_template(text(name), vars);
        } catch (const TemplateError& e) {
            throw TemplateError(std::string(e.what()) + " in template '" + name + "'");
        }
    }

    const std::filesystem::path& dir() const { return dir_; }

  private:
    struct Entry {
        std::string text;
        std::string version;
    };
    std::filesystem::path dir_;
    mutable std::map<std::string, Entry> cache_;
};

inline std::string join_values(const std::vector<std::string>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ", ";
        out += values[i];
    }
    return out;
}

// Task directive plus the think-then-answer output contract. This exact text
// is also what SFT records carry as their instruction field.
inline std::string solution_instruction(const PromptStore& store, const TaskCatalog& catalog,
                                        TaskKind task) {
    return store.render("solution_instruction",
                        {{"task_instruction", trim(store.text("task_instruction_" + task_name(task)))},
                         {"answers", join_values(catalog.values(task))}});
}

// The detailed-solution prompt: instruction followed by the instance payload.
// Used verbatim for trajectory generation and as the DPO prompt field.
inline std::string render_solution_prompt(const PromptStore& store, const TaskCatalog& catalog,
                                          TaskKind task, const std::string& input) {
    return store.render("solution_generate",
                        {{"instruction", solution_instruction(store, catalog, task)}, {"input", input}});
}

inline std::string render_rationale_prompt(const PromptStore& store, const TaskCatalog& catalog,
                                           TaskKind task, const std::string& input) {
    return store.render("rationale_cot",
                        {{"task_instruction", trim(store.text("task_instruction_" + task_name(task)))},
                         {"answers", join_values(catalog.values(task))},
                         {"input", input}});
}

inline std::string render_distill_prompt(const PromptStore& store, const std::string& problem,
                                         const std::string& raw_analysis) {
    return store.render("thought_distill", {{"problem", problem}, {"raw_analysis", raw_analysis}});
}

inline std::string numbered_steps(const std::vector<std::string>& steps) {
    std::string out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i) out += "\n";
        out += "Step " + std::to_string(i + 1) + ": " + steps[i];
    }
    return out;
}

// Teacher correction prompt: the erroneous trajectory, the ground truth as
// reference, and the exclusion-method contract.
inline std::string render_correction_prompt(const PromptStore& store, const TaskCatalog& catalog,
                                            const TaskInstance& instance,
                                            const Trajectory& rejected) {
    return store.render("error_correction",
                        {{"task_instruction",
                          trim(store.text("task_instruction_" + task_name(instance.task)))},
                         {"answers", join_values(catalog.values(instance.task))},
                         {"input", instance.input_payload},
                         {"gold", instance.gold.value},
                         {"trajectory", numbered_steps(rejected.steps)}});
}

}  // namespace logreasoner
