#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include "logreasoner/stage2.hpp"
#include "test_helpers.hpp"

using namespace logreasoner;
using nlohmann::json;

namespace {

PromptStore fixture_prompts() { return PromptStore(testutil::fixtures_dir() / "prompts"); }

Gateway gateway_for(const json& script, int max_retries = 1) {
    GatewayConfig cfg;
    cfg.base_url = "http://127.0.0.1:1";
    cfg.model = "m";
    cfg.max_retries = max_retries;
    cfg.backoff_base_ms = 1;
    return Gateway({{"ep", cfg}}, std::make_shared<MockTransport>(script));
}

const ModelRole kStudent{Role::Student, "ep"};
const ModelRole kTeacher{Role::Teacher, "ep"};

TaskInstance ad_instance(const std::string& id, const std::string& gold) {
    return {id, TaskKind::AnomalyDetection, "log window", {TaskKind::AnomalyDetection, gold}, "bgl"};
}

}  // namespace

TEST_CASE("parse_trajectory on the well-formed think-then-answer shape") {
    auto cat = TaskCatalog::defaults();
    Trajectory t = parse_trajectory(
        cat, TaskKind::AnomalyDetection,
        "<solutions>Step 1: inspect. Step 2: conclude.</solutions><answer>abnormal</answer>");
    REQUIRE(t.parse_ok);
    REQUIRE(t.steps.size() == 2);
    CHECK(t.steps[0] == "inspect.");
    CHECK(t.steps[1] == "conclude.");
    REQUIRE(t.answer.has_value());
    CHECK(t.answer->value == "abnormal");
}

TEST_CASE("parse_trajectory malformed and synonym cases") {
    auto cat = TaskCatalog::defaults();

    Trajectory missing_close = parse_trajectory(
        cat, TaskKind::AnomalyDetection, "<solutions>Step 1: x</solutions><answer>abnormal");
    CHECK_FALSE(missing_close.parse_ok);

    Trajectory no_solutions =
        parse_trajectory(cat, TaskKind::AnomalyDetection, "<answer>normal</answer>");
    CHECK_FALSE(no_solutions.parse_ok);

    // PFP answer via synonym fold: "Fault" -> failure
    Trajectory pfp = parse_trajectory(cat, TaskKind::PotentialFailurePrediction,
                                      "<solutions>Step 1: check.</solutions><answer>Fault.</answer>");
    REQUIRE(pfp.parse_ok);
    CHECK(pfp.answer->value == "failure");

    // answer tag present but unparseable token -> answer absent, parse_ok false
    Trajectory garbled = parse_trajectory(
        cat, TaskKind::AnomalyDetection, "<solutions>Step 1: x</solutions><answer>dunno</answer>");
    CHECK_FALSE(garbled.parse_ok);
    CHECK_FALSE(garbled.answer.has_value());
}

TEST_CASE("generate_trajectories maps gateway errors to unparseable trajectories") {
    auto store = fixture_prompts();
    auto cat = TaskCatalog::defaults();
    std::vector<TaskInstance> instances = {ad_instance("g1", "abnormal"), ad_instance("g2", "normal")};
    json tags = {
        {"traj:g1", {"<solutions>Step 1: fatal event.</solutions><answer>abnormal</answer>"}},
        {"traj:g2", {json{{"fault", "http_503"}}}},
    };
    Gateway gw = gateway_for({{"tags", tags}});
    auto trajectories = generate_trajectories(gw, kStudent, store, cat, instances, 0.0, 512);
    REQUIRE(trajectories.size() == 2);
    CHECK(trajectories[0].parse_ok);
    CHECK_FALSE(trajectories[1].parse_ok);
    CHECK(trajectories[1].raw.find("[gateway-error]") == 0);
}

TEST_CASE("partition splits by answer correctness and conserves the total") {
    auto cat = TaskCatalog::defaults();
    std::vector<std::pair<TaskInstance, Trajectory>> items;
    items.emplace_back(ad_instance("p1", "abnormal"),
                       parse_trajectory(cat, TaskKind::AnomalyDetection,
                                        "<solutions>Step 1: s</solutions><answer>abnormal</answer>"));
    items.emplace_back(ad_instance("p2", "abnormal"),
                       parse_trajectory(cat, TaskKind::AnomalyDetection,
                                        "<solutions>Step 1: s</solutions><answer>normal</answer>"));
    items.emplace_back(ad_instance("p3", "normal"),
                       parse_trajectory(cat, TaskKind::AnomalyDetection, "no tags at all"));

    Partition p = partition_trajectories(items);
    CHECK(p.correct.size() == 1);
    CHECK(p.erroneous.size() == 2);  // wrong answer + unparseable
    CHECK(p.correct.size() + p.erroneous.size() == items.size());

    auto counts = partition_counts(p);
    CHECK(counts[{"anomaly_detection", "bgl"}].correct == 1);
    CHECK(counts[{"anomaly_detection", "bgl"}].erroneous == 2);

    Partition all_correct = partition_trajectories({items[0]});
    CHECK(all_correct.erroneous.empty());
}

TEST_CASE("correct_trajectory splices the teacher revision after the preserved prefix") {
    auto store = fixture_prompts();
    auto cat = TaskCatalog::defaults();
    TaskInstance inst = ad_instance("c1", "abnormal");
    Trajectory rejected = parse_trajectory(
        cat, TaskKind::AnomalyDetection,
        "<solutions>Step 1: one\nStep 2: two\nStep 3: three\nStep 4: four</solutions>"
        "<answer>normal</answer>");
    REQUIRE(rejected.steps.size() == 4);

    json reply = {{"first_error_step", 3},
                  {"reflection", "step three assumed the wrong baseline"},
                  {"revised_steps", {"revised three", "revised four"}},
                  {"answer", "abnormal"}};
    Gateway gw = gateway_for({{"tags", {{"correct:c1", {reply.dump()}}}}});
    CorrectionRun run = correct_trajectories(gw, kTeacher, store, cat, {{inst, rejected}}, 3, 0.0, 512);
    REQUIRE(run.corrected.size() == 1);
    const CorrectionResult& result = run.corrected[0].result;
    CHECK(result.first_error_index == 3);
    REQUIRE(result.corrected.steps.size() == 4);  // originals 1-2 + 2 revisions
    CHECK(result.corrected.steps[0] == "one");
    CHECK(result.corrected.steps[1] == "two");
    CHECK(result.corrected.steps[2] == "revised three");
    CHECK(result.corrected.steps[3] == "revised four");
    CHECK(result.corrected.parse_ok);
    CHECK(result.corrected.answer->value == "abnormal");
}

TEST_CASE("correction with k=1 shares no steps with the rejected trajectory") {
    auto store = fixture_prompts();
    auto cat = TaskCatalog::defaults();
    TaskInstance inst = ad_instance("c2", "normal");
    Trajectory rejected =
        parse_trajectory(cat, TaskKind::AnomalyDetection,
                         "<solutions>Step 1: bad start\nStep 2: bad end</solutions><answer>abnormal</answer>");
    json reply = {{"first_error_step", 1},
                  {"reflection", "the premise itself was wrong"},
                  {"revised_steps", {"fresh one", "fresh two"}},
                  {"answer", "normal"}};
    Gateway gw = gateway_for({{"tags", {{"correct:c2", {reply.dump()}}}}});
    CorrectionRun run = correct_trajectories(gw, kTeacher, store, cat, {{inst, rejected}}, 3, 0.0, 512);
    REQUIRE(run.corrected.size() == 1);
    CHECK(run.corrected[0].result.corrected.steps ==
          std::vector<std::string>{"fresh one", "fresh two"});
}

TEST_CASE("correction retries on wrong answers and out-of-range k, then drops") {
    auto store = fixture_prompts();
    auto cat = TaskCatalog::defaults();
    TaskInstance inst = ad_instance("c3", "abnormal");
    Trajectory rejected = parse_trajectory(
        cat, TaskKind::AnomalyDetection,
        "<solutions>Step 1: a\nStep 2: b</solutions><answer>normal</answer>");

    SECTION("wrong answer on attempt 1, right on attempt 2") {
        json wrong = {{"first_error_step", 1}, {"reflection", "r"},
                      {"revised_steps", {"x"}}, {"answer", "normal"}};
        json right = {{"first_error_step", 2}, {"reflection", "r2"},
                      {"revised_steps", {"y"}}, {"answer", "abnormal"}};
        Gateway gw = gateway_for({{"tags", {{"correct:c3", {wrong.dump(), right.dump()}}}}});
        CorrectionRun run =
            correct_trajectories(gw, kTeacher, store, cat, {{inst, rejected}}, 3, 0.0, 512);
        REQUIRE(run.corrected.size() == 1);
        CHECK(run.corrected[0].result.reflection == "r2");  // attempt 2's content
    }

    SECTION("k beyond the step count triggers a retry") {
        json oob = {{"first_error_step", 9}, {"reflection", "r"},
                    {"revised_steps", {"x"}}, {"answer", "abnormal"}};
        json good = {{"first_error_step", 1}, {"reflection", "ok"},
                     {"revised_steps", {"x"}}, {"answer", "abnormal"}};
        Gateway gw = gateway_for({{"tags", {{"correct:c3", {oob.dump(), good.dump()}}}}});
        CorrectionRun run =
            correct_trajectories(gw, kTeacher, store, cat, {{inst, rejected}}, 2, 0.0, 512);
        REQUIRE(run.corrected.size() == 1);
        CHECK(run.corrected[0].result.reflection == "ok");
    }

    SECTION("exhausted attempts drop the item with a reason") {
        Gateway gw = gateway_for({{"tags", {{"correct:c3", {"never json"}}}}});
        CorrectionRun run =
            correct_trajectories(gw, kTeacher, store, cat, {{inst, rejected}}, 2, 0.0, 512);
        CHECK(run.corrected.empty());
        REQUIRE(run.dropped.size() == 1);
        CHECK(run.dropped[0].first == "c3");
        CHECK(run.dropped[0].second.find("2 attempts") != std::string::npos);
    }
}

TEST_CASE("build_pref_pairs validates prefix preservation and answers") {
    auto cat = TaskCatalog::defaults();
    TaskInstance inst = ad_instance("p1", "abnormal");
    Trajectory rejected = parse_trajectory(
        cat, TaskKind::AnomalyDetection,
        "<solutions>Step 1: keep\nStep 2: wrong</solutions><answer>normal</answer>");

    CorrectedItem item;
    item.instance = inst;
    item.rejected = rejected;
    item.result.first_error_index = 2;
    item.result.reflection = "r";
    item.result.corrected.steps = {"keep", "fixed"};
    item.result.corrected.answer = Label{TaskKind::AnomalyDetection, "abnormal"};
    item.result.corrected.raw = serialize_trajectory(item.result.corrected.steps, "abnormal");
    item.result.corrected.parse_ok = true;

    auto pairs = build_pref_pairs({item});
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].chosen.answer->value == "abnormal");
    CHECK(pairs[0].rejected.answer->value == "normal");
    // byte-equal preserved prefix
    CHECK(pairs[0].chosen.steps[0] == rejected.steps[0]);

    CHECK(build_pref_pairs({}).empty());

    // a corrupted prefix is a pipeline bug and must abort emission
    CorrectedItem corrupted = item;
    corrupted.result.corrected.steps = {"KEPT BUT DIFFERENT", "fixed"};
    CHECK_THROWS_AS(build_pref_pairs({corrupted}), InvariantViolation);

    // a corrected answer that mismatches gold cannot pass construction
    CorrectedItem wrong = item;
    wrong.result.corrected.answer = Label{TaskKind::AnomalyDetection, "normal"};
    CHECK_THROWS_AS(build_pref_pairs({wrong}), InvariantViolation);
}

TEST_CASE("dpo records carry the rendered prompt and both trajectory texts") {
    auto store = fixture_prompts();
    auto cat = TaskCatalog::defaults();
    TaskInstance inst = ad_instance("d1", "abnormal");
    Trajectory rejected = parse_trajectory(
        cat, TaskKind::AnomalyDetection,
        "<solutions>Step 1: keep\nStep 2: wrong</solutions><answer>normal</answer>");
    Trajectory chosen;
    chosen.steps = {"keep", "fixed"};
    chosen.answer = Label{TaskKind::AnomalyDetection, "abnormal"};
    chosen.raw = serialize_trajectory(chosen.steps, "abnormal");
    chosen.parse_ok = true;

    auto pairs = std::vector<PreferencePair>{make_preference_pair(inst, chosen, rejected)};
    auto records = to_dpo_records(pairs, store, cat);
    REQUIRE(records.size() == 1);
    CHECK(records[0].prompt == render_solution_prompt(store, cat, inst.task, inst.input_payload));
    CHECK(records[0].chosen == chosen.raw);
    CHECK(records[0].rejected == rejected.raw);
    CHECK(records[0].chosen != records[0].rejected);
}

TEST_CASE("trajectory records round-trip through the dump format") {
    testutil::TempDir tmp;
    auto cat = TaskCatalog::defaults();
    TrajectoryRecord r;
    r.instance_id = "x1";
    r.task = TaskKind::PotentialFailurePrediction;
    r.trajectory = parse_trajectory(cat, r.task,
                                    "<solutions>Step 1: check</solutions><answer>failure</answer>");
    r.disposition = "correct";
    write_trajectory_records({r}, tmp.path / "traj.jsonl");
    auto loaded = read_trajectory_records(tmp.path / "traj.jsonl", cat);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].instance_id == "x1");
    CHECK(loaded[0].trajectory.steps == r.trajectory.steps);
    CHECK(loaded[0].trajectory.answer->value == "failure");
    CHECK(loaded[0].trajectory.parse_ok);
    CHECK(loaded[0].disposition == "correct");
}

TEST_CASE("determinism under mock: identical scripts yield identical outputs") {
    auto store = fixture_prompts();
    auto cat = TaskCatalog::defaults();
    std::vector<TaskInstance> instances = {ad_instance("m1", "abnormal"), ad_instance("m2", "normal")};
    json tags = {
        {"traj:m1", {"<solutions>Step 1: s</solutions><answer>abnormal</answer>"}},
        {"traj:m2", {"<solutions>Step 1: s</solutions><answer>abnormal</answer>"}},
    };
    auto run_once = [&] {
        Gateway gw = gateway_for({{"tags", tags}});
        auto trajectories = generate_trajectories(gw, kStudent, store, cat, instances, 0.0, 512);
        std::vector<std::pair<TaskInstance, Trajectory>> items;
        for (std::size_t i = 0; i < instances.size(); ++i)
            items.emplace_back(instances[i], trajectories[i]);
        Partition p = partition_trajectories(items);
        std::string digest;
        for (const auto& [inst, t] : p.correct) digest += "C:" + inst.id + ":" + t.raw + "\n";
        for (const auto& [inst, t] : p.erroneous) digest += "E:" + inst.id + ":" + t.raw + "\n";
        return digest;
    };
    CHECK(run_once() == run_once());
}
