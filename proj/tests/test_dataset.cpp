#include <catch2/catch_amalgamated.hpp>

#include "logreasoner/dataset.hpp"
#include "test_helpers.hpp"

using namespace logreasoner;

namespace {

std::vector<SftRecord> sample_sft() {
    return {
        {"Decide whether the session contains an anomaly.",
         "- RAS KERNEL FATAL data TLB error interrupt",
         "<solutions>\nStep 1: A fault-level event is present.\n</solutions>\n<answer>abnormal</answer>"},
        {"Decide whether the session contains an anomaly.",
         "- RAS KERNEL INFO generating core.2275",
         "<solutions>\nStep 1: Only informational events appear.\n</solutions>\n<answer>normal</answer>"},
    };
}

std::vector<DpoRecord> sample_dpo() {
    return {
        {"prompt text with\nnewlines", "<answer>failure</answer>", "<answer>notification</answer>"},
        {"second prompt", "chosen \"quoted\"", "rejected \\backslash"},
    };
}

}  // namespace

TEST_CASE("emit_sft: fixed key order, LF endings, manifest alongside") {
    testutil::TempDir tmp;
    auto path = tmp.path / "sft.jsonl";
    TrainingManifest m = emit_sft(sample_sft(), path, {TrainStage::SolutionSFT, "anomaly_detection", "bgl"});

    std::string body = read_text_file(path);
    auto lines = split_lines(body);
    REQUIRE(lines.size() == 2);
    // keys in documented order, not alphabetical
    CHECK(lines[0].find("\"instruction\"") < lines[0].find("\"input\""));
    CHECK(lines[0].find("\"input\"") < lines[0].find("\"output\""));
    CHECK(body.find('\r') == std::string::npos);
    CHECK(body.back() == '\n');

    CHECK(m.record_count == 2);
    CHECK(m.content_hash == sha256_hex(body));
    CHECK(m.dataset_path == "sft.jsonl");
    REQUIRE(std::filesystem::exists(manifest_path_for(path)));
    TrainingManifest loaded = read_manifest(manifest_path_for(path));
    CHECK(loaded.record_count == m.record_count);
    CHECK(loaded.content_hash == m.content_hash);
}

TEST_CASE("sft manifests record the SFT hyperparameters") {
    testutil::TempDir tmp;
    TrainingManifest m =
        emit_sft(sample_sft(), tmp.path / "t.jsonl", {TrainStage::ThoughtSFT, "mixed", "mixed"});
    CHECK(m.learning_rate == 3.0e-5);
    CHECK(m.batch_size == 16);
    CHECK(m.epochs == 5);
    CHECK(m.context_window == 2096);  // recorded verbatim
    CHECK(m.scheduler == "cosine");
    CHECK_FALSE(m.beta.has_value());
}

TEST_CASE("dpo manifests record the DPO hyperparameters") {
    testutil::TempDir tmp;
    TrainingManifest m =
        emit_dpo(sample_dpo(), tmp.path / "d.jsonl", {TrainStage::DPO, "anomaly_detection", "bgl"});
    CHECK(m.learning_rate == 5.0e-6);
    CHECK(m.batch_size == 4);
    CHECK(m.epochs == 5);
    REQUIRE(m.beta.has_value());
    CHECK(*m.beta == 0.1);
    CHECK(m.record_count == 2);
}

TEST_CASE("empty record list yields a zero-row file with a valid manifest") {
    testutil::TempDir tmp;
    TrainingManifest m = emit_sft({}, tmp.path / "empty.jsonl", {TrainStage::ThoughtSFT, "mixed", "mixed"});
    CHECK(m.record_count == 0);
    CHECK(read_text_file(tmp.path / "empty.jsonl").empty());
    CHECK(read_manifest(manifest_path_for(tmp.path / "empty.jsonl")).record_count == 0);
}

TEST_CASE("re-emitting identical records yields an identical content hash") {
    testutil::TempDir tmp;
    TrainingManifest a = emit_sft(sample_sft(), tmp.path / "a.jsonl", {TrainStage::ThoughtSFT, "x", "y"});
    TrainingManifest b = emit_sft(sample_sft(), tmp.path / "b.jsonl", {TrainStage::ThoughtSFT, "x", "y"});
    CHECK(a.content_hash == b.content_hash);
}

TEST_CASE("emission refuses invariant violations") {
    testutil::TempDir tmp;
    CHECK_THROWS_AS(emit_sft({{"", "in", "out"}}, tmp.path / "x.jsonl", {}), InvariantViolation);
    CHECK_THROWS_AS(emit_sft({{"inst", "in", ""}}, tmp.path / "x.jsonl", {}), InvariantViolation);
    CHECK_THROWS_AS(
        emit_dpo({{"p", "same", "same"}}, tmp.path / "x.jsonl", {TrainStage::DPO, "t", "s"}),
        InvariantViolation);
    CHECK_THROWS_AS(emit_dpo({{"", "a", "b"}}, tmp.path / "x.jsonl", {TrainStage::DPO, "t", "s"}),
                    InvariantViolation);
}

TEST_CASE("round-trip: reading an emitted file reproduces the records field-for-field") {
    testutil::TempDir tmp;
    // awkward strings: newlines, quotes, backslashes, unicode, json-ish text
    std::vector<SftRecord> records;
    testutil::TempDir unused;
    logreasoner::Rng rng(404);
    const std::vector<std::string> atoms = {
        "line\nbreak", "quote\"inside", "back\\slash", "tab\tchar", "unicode: 温度超过阈值",
        "{\"looks\":\"like json\"}", "plain", "trailing space ", " leading", "emoji ✓"};
    for (int i = 0; i < 50; ++i) {
        auto pick = [&] { return atoms[rng.bounded(atoms.size())] + std::to_string(i); };
        records.push_back({pick(), pick(), pick()});
    }
    auto path = tmp.path / "rt.jsonl";
    emit_sft(records, path, {TrainStage::SolutionSFT, "t", "s"});
    auto loaded = read_sft_file(path);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(loaded[i].instruction == records[i].instruction);
        CHECK(loaded[i].input == records[i].input);
        CHECK(loaded[i].output == records[i].output);
    }

    auto dpath = tmp.path / "rt_dpo.jsonl";
    emit_dpo(sample_dpo(), dpath, {TrainStage::DPO, "t", "s"});
    auto dpo_loaded = read_dpo_file(dpath);
    REQUIRE(dpo_loaded.size() == 2);
    CHECK(dpo_loaded[0].prompt == "prompt text with\nnewlines");
    CHECK(dpo_loaded[1].rejected == "rejected \\backslash");
}

TEST_CASE("golden fixtures: emitted bytes are format-exact") {
    testutil::TempDir tmp;
    auto sft_path = tmp.path / "sft_golden.jsonl";
    emit_sft(sample_sft(), sft_path, {TrainStage::SolutionSFT, "anomaly_detection", "bgl+spirit"});
    CHECK(read_text_file(sft_path) == read_text_file(testutil::golden_dir() / "sft_golden.jsonl"));
    CHECK(read_text_file(manifest_path_for(sft_path)) ==
          read_text_file(testutil::golden_dir() / "sft_golden.jsonl.manifest.json"));

    auto dpo_path = tmp.path / "dpo_golden.jsonl";
    emit_dpo(sample_dpo(), dpo_path, {TrainStage::DPO, "potential_failure_prediction", "huawei+h3c"});
    CHECK(read_text_file(dpo_path) == read_text_file(testutil::golden_dir() / "dpo_golden.jsonl"));
    CHECK(read_text_file(manifest_path_for(dpo_path)) ==
          read_text_file(testutil::golden_dir() / "dpo_golden.jsonl.manifest.json"));

    // the golden manifest itself must carry the published hyperparameters
    TrainingManifest golden =
        read_manifest(testutil::golden_dir() / "dpo_golden.jsonl.manifest.json");
    CHECK(golden.learning_rate == 5.0e-6);
    CHECK(*golden.beta == 0.1);
}

TEST_CASE("stats groups by stage, task and source and sums duplicates") {
    auto make = [](TrainStage stage, const std::string& task, const std::string& src,
                   std::size_t count) {
        TrainingManifest m;
        m.stage = stage;
        m.task = task;
        m.source_domain = src;
        apply_stage_hyperparams(m);
        m.record_count = count;
        return m;
    };

    SECTION("the published dataset counts render as one row per task") {
        std::vector<TrainingManifest> manifests = {
            make(TrainStage::SolutionSFT, "anomaly_detection", "bgl+spirit", 1265),
            make(TrainStage::DPO, "anomaly_detection", "bgl+spirit", 735),
            make(TrainStage::SolutionSFT, "log_semantic_matching", "huawei+h3c", 1626),
            make(TrainStage::DPO, "log_semantic_matching", "huawei+h3c", 374),
            make(TrainStage::SolutionSFT, "potential_failure_prediction", "huawei+h3c", 1233),
            make(TrainStage::DPO, "potential_failure_prediction", "huawei+h3c", 767),
            make(TrainStage::SolutionSFT, "root_cause_analysis", "huawei", 302),
            make(TrainStage::DPO, "root_cause_analysis", "huawei", 698),
        };
        StatsTable table = stats(manifests);
        REQUIRE(table.rows.size() == 4);
        std::string text = table.to_text();
        CHECK(text.find("Anomaly Detection") != std::string::npos);
        bool found = false;
        for (const StatsRow& row : table.rows)
            if (row.task == "anomaly_detection") {
                found = true;
                CHECK(row.sft_count == 1265);
                CHECK(row.dpo_count == 735);
            }
        CHECK(found);
    }

    SECTION("single zero-count manifest yields a single zero row") {
        StatsTable table = stats({make(TrainStage::ThoughtSFT, "mixed", "mixed", 0)});
        REQUIRE(table.rows.size() == 1);
        CHECK(table.rows[0].sft_count == 0);
        CHECK_FALSE(table.rows[0].has_dpo);
        CHECK(table.to_text().find(" -") != std::string::npos);  // dpo column renders '-'
    }

    SECTION("two manifests with the same task and stage sum their counts") {
        std::vector<TrainingManifest> manifests = {
            make(TrainStage::SolutionSFT, "anomaly_detection", "bgl", 100),
            make(TrainStage::SolutionSFT, "anomaly_detection", "bgl", 23),
        };
        // independent sum oracle over the manifest fields
        std::size_t expected = 0;
        for (const auto& m : manifests) expected += m.record_count;
        StatsTable table = stats(manifests);
        REQUIRE(table.rows.size() == 1);
        CHECK(table.rows[0].sft_count == expected);
    }
}

TEST_CASE("manifest json round-trip") {
    TrainingManifest m;
    m.stage = TrainStage::DPO;
    m.task = "root_cause_analysis";
    m.source_domain = "huawei";
    apply_stage_hyperparams(m);
    m.dataset_path = "dpo_root_cause_analysis.jsonl";
    m.record_count = 698;
    m.content_hash = std::string(64, 'a');
    TrainingManifest back = manifest_from_json(manifest_to_json(m));
    CHECK(back.stage == m.stage);
    CHECK(back.task == m.task);
    CHECK(back.learning_rate == m.learning_rate);
    CHECK(back.beta == m.beta);
    CHECK(back.record_count == m.record_count);
    CHECK(back.content_hash == m.content_hash);
}
