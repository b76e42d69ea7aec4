#pragma once
// Training-ready dataset emission: SFT and DPO JSONL files with fixed key
// order, hyperparameter manifests, and corpus statistics. Emission is
// deterministic so content hashes are stable across runs and platforms.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "logreasoner/core.hpp"
#include "logreasoner/util.hpp"

namespace logreasoner {

using ordered_json = nlohmann::ordered_json;

struct SftRecord {
    std::string instruction;
    std::string input;
    std::string output;
};

struct DpoRecord {
    std::string prompt;
    std::string chosen;
    std::string rejected;
};

enum class TrainStage { ThoughtSFT, SolutionSFT, DPO };

inline std::string train_stage_name(TrainStage s) {
    switch (s) {
        case TrainStage::ThoughtSFT: return "thought_sft";
        case TrainStage::SolutionSFT: return "solution_sft";
        case TrainStage::DPO: return "dpo";
    }
    throw std::logic_error("unknown train stage");
}

inline std::optional<TrainStage> train_stage_from_name(std::string_view s) {
    if (s == "thought_sft") return TrainStage::ThoughtSFT;
    if (s == "solution_sft") return TrainStage::SolutionSFT;
    if (s == "dpo") return TrainStage::DPO;
    return std::nullopt;
}

struct TrainingManifest {
    TrainStage stage = TrainStage::ThoughtSFT;
    std::string task;           // task name, or "mixed"
    std::string source_domain;  // distinct instance sources joined with '+'
    double learning_rate = 0.0;
    int batch_size = 0;
    int epochs = 0;
    int context_window = 0;     // 2096 recorded verbatim for both stages
    std::optional<double> beta; // DPO only
    std::string scheduler;
    std::string dataset_path;   // file name; the manifest sits alongside it
    std::size_t record_count = 0;
    std::string content_hash;   // sha256 of the dataset file bytes
};

inline void apply_stage_hyperparams(TrainingManifest& m) {
    if (m.stage == TrainStage::DPO) {
        m.learning_rate = 5.0e-6;
        m.batch_size = 4;
        m.epochs = 5;
        m.context_window = 2096;
        m.beta = 0.1;
        m.scheduler = "cosine";
    } else {
        m.learning_rate = 3.0e-5;
        m.batch_size = 16;
        m.epochs = 5;
        m.context_window = 2096;
        m.beta.reset();
        m.scheduler = "cosine";
    }
}

inline ordered_json manifest_to_json(const TrainingManifest& m) {
    ordered_json j;
    j["stage"] = train_stage_name(m.stage);
    j["task"] = m.task;
    j["source_domain"] = m.source_domain;
    j["learning_rate"] = m.learning_rate;
    j["batch_size"] = m.batch_size;
    j["epochs"] = m.epochs;
    j["context_window"] = m.context_window;
    if (m.beta) j["beta"] = *m.beta;
    j["scheduler"] = m.scheduler;
    j["dataset_path"] = m.dataset_path;
    j["record_count"] = m.record_count;
    j["content_hash"] = m.content_hash;
    return j;
}

inline TrainingManifest manifest_from_json(const ordered_json& j) {
    TrainingManifest m;
    auto stage = train_stage_from_name(j.at("stage").get<std::string>());
    if (!stage) throw ParseError("unknown manifest stage: " + j.at("stage").get<std::string>(), 1);
    m.stage = *stage;
    m.task = j.at("task").get<std::string>();
    m.source_domain = j.at("source_domain").get<std::string>();
    m.learning_rate = j.at("learning_rate").get<double>();
    m.batch_size = j.at("batch_size").get<int>();
    m.epochs = j.at("epochs").get<int>();
    m.context_window = j.at("context_window").get<int>();
    if (j.contains("beta")) m.beta = j.at("beta").get<double>();
    m.scheduler = j.at("scheduler").get<std::string>();
    m.dataset_path = j.at("dataset_path").get<std::string>();
    m.record_count = j.at("record_count").get<std::size_t>();
    m.content_hash = j.at("content_hash").get<std::string>();
    return m;
}

inline std::filesystem::path manifest_path_for(const std::filesystem::path& dataset_path) {
    std::filesystem::path p = dataset_path;
    p += ".manifest.json";
    return p;
}

inline void write_manifest(const TrainingManifest& m, const std::filesystem::path& dataset_path) {
    write_text_file_atomic(manifest_path_for(dataset_path), manifest_to_json(m).dump(2) + "\n");
}

inline TrainingManifest read_manifest(const std::filesystem::path& path) {
    return manifest_from_json(ordered_json::parse(read_text_file(path)));
}

struct EmitMeta {
    TrainStage stage = TrainStage::ThoughtSFT;
    std::string task = "mixed";
    std::string source_domain = "mixed";
};

// One record per line, UTF-8, LF, keys in fixed order (instruction, input,
// output). The manifest is written alongside as <path>.manifest.json.
inline TrainingManifest emit_sft(const std::vector<SftRecord>& records,
                                 const std::filesystem::path& path, const EmitMeta& meta) {
    if (meta.stage == TrainStage::DPO) throw InvariantViolation("emit_sft called with DPO stage");
    std::string body;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const SftRecord& r = records[i];
        if (r.instruction.empty() || r.output.empty())
            throw InvariantViolation("sft record " + std::to_string(i) +
                                     " has an empty instruction or output");
        ordered_json j;
        j["instruction"] = r.instruction;
        j["input"] = r.input;
        j["output"] = r.output;
        body += j.dump();
        body += '\n';
    }
    write_text_file_atomic(path, body);

    TrainingManifest m;
    m.stage = meta.stage;
    m.task = meta.task;
    m.source_domain = meta.source_domain;
    apply_stage_hyperparams(m);
    m.dataset_path = path.filename().string();
    m.record_count = records.size();
    m.content_hash = sha256_hex(body);
    write_manifest(m, path);
    return m;
}

inline TrainingManifest emit_dpo(const std::vector<DpoRecord>& records,
                                 const std::filesystem::path& path, const EmitMeta& meta) {
    std::string body;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const DpoRecord& r = records[i];
        if (r.prompt.empty() || r.chosen.empty() || r.rejected.empty())
            throw InvariantViolation("dpo record " + std::to_string(i) + " has an empty field");
        if (r.chosen == r.rejected)
            throw InvariantViolation("dpo record " + std::to_string(i) + " has chosen == rejected");
        ordered_json j;
        j["prompt"] = r.prompt;
        j["chosen"] = r.chosen;
        j["rejected"] = r.rejected;
        body += j.dump();
        body += '\n';
    }
    write_text_file_atomic(path, body);

    TrainingManifest m;
    m.stage = TrainStage::DPO;
    m.task = meta.task;
    m.source_domain = meta.source_domain;
    apply_stage_hyperparams(m);
    m.dataset_path = path.filename().string();
    m.record_count = records.size();
    m.content_hash = sha256_hex(body);
    write_manifest(m, path);
    return m;
}

inline std::vector<SftRecord> read_sft_file(const std::filesystem::path& path) {
    std::vector<SftRecord> records;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        ordered_json j = ordered_json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("malformed sft record", line);
        records.push_back({j.at("instruction").get<std::string>(), j.at("input").get<std::string>(),
                           j.at("output").get<std::string>()});
    });
    return records;
}

inline std::vector<DpoRecord> read_dpo_file(const std::filesystem::path& path) {
    std::vector<DpoRecord> records;
    for_each_jsonl_line(path, [&](std::size_t line, std::string_view text) {
        ordered_json j = ordered_json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError("malformed dpo record", line);
        records.push_back({j.at("prompt").get<std::string>(), j.at("chosen").get<std::string>(),
                           j.at("rejected").get<std::string>()});
    });
    return records;
}

// ---------------------------------------------------------------------------
// Corpus statistics, grouped the way the dataset tables are presented:
// one row per (stage group, task, source domain) with SFT and DPO counts.

struct StatsRow {
    std::string stage_group;  // "stage1" or "stage2"
    std::string task;
    std::string source_domain;
    std::size_t sft_count = 0;
    bool has_dpo = false;
    std::size_t dpo_count = 0;
};

struct StatsTable {
    std::vector<StatsRow> rows;

    ordered_json to_json() const {
        ordered_json out;
        out["rows"] = ordered_json::array();
        for (const StatsRow& r : rows) {
            ordered_json j;
            j["stage"] = r.stage_group;
            j["task"] = r.task;
            j["source_domain"] = r.source_domain;
            j["sft_count"] = r.sft_count;
            j["dpo_count"] = r.has_dpo ? ordered_json(r.dpo_count) : ordered_json(nullptr);
            out["rows"].push_back(std::move(j));
        }
        return out;
    }

    std::string to_text() const {
        std::vector<std::array<std::string, 5>> cells;
        cells.push_back({"Stage", "Task", "Source", "SFT", "DPO"});
        for (const StatsRow& r : rows) {
            std::string task_display = r.task;
            if (auto kind = task_from_name(r.task)) task_display = task_display_name(*kind);
            cells.push_back({r.stage_group, task_display, r.source_domain, std::to_string(r.sft_count),
                             r.has_dpo ? std::to_string(r.dpo_count) : std::string("-")});
        }
        std::array<std::size_t, 5> widths{};
        for (const auto& row : cells)
            for (std::size_t c = 0; c < 5; ++c) widths[c] = std::max(widths[c], row[c].size());
        std::string out;
        for (const auto& row : cells) {
            for (std::size_t c = 0; c < 5; ++c) {
                out += row[c];
                if (c + 1 < 5) out.append(widths[c] - row[c].size() + 2, ' ');
            }
            out += '\n';
        }
        return out;
    }
};

inline StatsTable stats(const std::vector<TrainingManifest>& manifests) {
    struct Acc {
        std::size_t sft = 0;
        bool has_dpo = false;
        std::size_t dpo = 0;
    };
    std::map<std::tuple<std::string, std::string, std::string>, Acc> groups;
    for (const TrainingManifest& m : manifests) {
        std::string group = m.stage == TrainStage::ThoughtSFT ? "stage1" : "stage2";
        Acc& acc = groups[{group, m.task, m.source_domain}];
        if (m.stage == TrainStage::DPO) {
            acc.has_dpo = true;
            acc.dpo += m.record_count;
        } else {
            acc.sft += m.record_count;
        }
    }
    StatsTable table;
    for (const auto& [key, acc] : groups) {
        StatsRow row;
        row.stage_group = std::get<0>(key);
        row.task = std::get<1>(key);
        row.source_domain = std::get<2>(key);
        row.sft_count = acc.sft;
        row.has_dpo = acc.has_dpo;
        row.dpo_count = acc.dpo;
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline std::vector<TrainingManifest> load_manifests(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> paths;
    if (std::filesystem::exists(dir))
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            const std::string name = entry.path().filename().string();
            if (name.size() > 14 && name.substr(name.size() - 14) == ".manifest.json")
                paths.push_back(entry.path());
        }
    std::sort(paths.begin(), paths.end());
    std::vector<TrainingManifest> manifests;
    manifests.reserve(paths.size());
    for (const auto& p : paths) manifests.push_back(read_manifest(p));
    return manifests;
}

}  // namespace logreasoner
