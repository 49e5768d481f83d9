#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "aggvpr/retrieval.hpp"
#include "aggvpr/run_config.hpp"
#include "aggvpr/tensor_io.hpp"
#include "aggvpr/training.hpp"

using namespace aggvpr;

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<unsigned char> file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args, const std::string& log_path) {
    const std::string cmd =
        std::string(AGGVPR_CLI_PATH) + " " + args + " > " + log_path + " 2>&1";
    return std::system(cmd.c_str());
}

// One shared end-to-end workspace: synth corpus, config, tokens, a short
// training run. Built once; later tests inspect its artifacts.
struct CliWorkspace {
    std::string dir;
    std::string config_path;
    std::string corpus;

    CliWorkspace() {
        dir = (fs::temp_directory_path() / "aggvpr_cli").string();
        fs::remove_all(dir);
        fs::create_directories(dir);
        corpus = dir + "/corpus";

        std::ofstream spec(dir + "/synth.cfg");
        spec << "num_places=8\nviews_per_place=3\nimage_size=28\nconfuser_pairs=2\n"
             << "max_shift_px=4\nmax_brightness_delta=12\nnoise_sigma=5\n"
             << "grid_spacing_m=100\nseed=3\n";
        spec.close();

        RunConfig cfg;
        cfg.backbone = BackboneConfig{};  // toy 28x28 backbone
        cfg.agg.num_tokens = 2;
        cfg.train.places_per_batch = 2;
        cfg.train.images_per_place = 2;
        cfg.train.lr = 1e-3;
        cfg.train.max_epochs = 1;
        cfg.token_init.sample_images = 8;
        cfg.seed = 11;
        config_path = dir + "/run.cfg";
        cfg.to_file(config_path);

        EXPECT_EQ(run_cli("synth --spec " + dir + "/synth.cfg --out " + corpus, dir + "/synth.log"),
                  0)
            << slurp(dir + "/synth.log");
        EXPECT_EQ(run_cli("init-tokens --config " + config_path + " --manifest " + corpus +
                              "/train.jsonl --out " + dir + "/agg.imgt",
                          dir + "/init.log"),
                  0)
            << slurp(dir + "/init.log");
        EXPECT_EQ(run_cli("train --config " + config_path + " --manifest " + corpus +
                              "/train.jsonl --val-manifest " + corpus + "/eval.jsonl --agg " +
                              dir + "/agg.imgt --out " + dir + "/train_out",
                          dir + "/train.log"),
                  0)
            << slurp(dir + "/train.log");
    }
};

const CliWorkspace& workspace() {
    static CliWorkspace ws;
    return ws;
}

}  // namespace

TEST(RunConfig, RoundTripsLosslessly) {
    RunConfig cfg;
    cfg.train.lr = 0.00012345678901234567;
    cfg.agg.strategy = InsertStrategy::kDeep;
    cfg.agg.init = InitMethod::kNormal;
    cfg.seed = 0xdeadbeefcafe;
    cfg.train_manifest = "some/path.jsonl";
    const std::string a = (fs::temp_directory_path() / "cfg_a.cfg").string();
    const std::string b = (fs::temp_directory_path() / "cfg_b.cfg").string();
    cfg.to_file(a);
    RunConfig loaded = RunConfig::from_file(a);
    loaded.to_file(b);
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_DOUBLE_EQ(loaded.train.lr, cfg.train.lr);
    EXPECT_EQ(loaded.agg.strategy, InsertStrategy::kDeep);
    EXPECT_EQ(loaded.seed, cfg.seed);
    EXPECT_EQ(loaded.train_manifest, "some/path.jsonl");
}

TEST(RunConfig, UnknownKeyRejected) {
    const std::string path = (fs::temp_directory_path() / "cfg_bad.cfg").string();
    std::ofstream(path) << "image_h=28\nnot_a_key=1\n";
    EXPECT_THROW(RunConfig::from_file(path), ParseError);
}

TEST(RunConfig, OverridesApply) {
    RunConfig cfg;
    cfg.apply_override("lr=0.5");
    EXPECT_DOUBLE_EQ(cfg.train.lr, 0.5);
    cfg.apply_override("strategy=c");
    EXPECT_EQ(cfg.agg.strategy, InsertStrategy::kDeep);
    EXPECT_THROW(cfg.apply_override("bogus=1"), ParseError);
    EXPECT_THROW(cfg.apply_override("lr=abc"), ParseError);
}

TEST(Cli, VersionPrintsIdentity) {
    const std::string log = (fs::temp_directory_path() / "version.log").string();
    ASSERT_EQ(run_cli("--version", log), 0);
    EXPECT_NE(slurp(log).find("aggvpr 1.0.0"), std::string::npos);
}

TEST(Cli, UnknownFlagFailsNonzero) {
    const std::string log = (fs::temp_directory_path() / "badflag.log").string();
    EXPECT_NE(run_cli("eval --nonsense", log), 0);
}

TEST(Cli, PipelineArtifactsExist) {
    const auto& ws = workspace();
    EXPECT_TRUE(fs::exists(ws.dir + "/agg.imgt"));
    EXPECT_TRUE(fs::exists(ws.dir + "/train_out/ckpt_final.imgt"));
    EXPECT_TRUE(fs::exists(ws.dir + "/train_out/ckpt_epoch0.imgt"));
    EXPECT_TRUE(fs::exists(ws.dir + "/train_out/ckpt_best.imgt"));
    EXPECT_TRUE(fs::exists(ws.dir + "/train_out/training_log.csv"));
    EXPECT_TRUE(fs::exists(ws.dir + "/train_out/run_config.cfg"));

    const auto agg = load_tensor_archive(ws.dir + "/agg.imgt");
    ASSERT_EQ(agg.size(), 1u);
    EXPECT_EQ(agg[0].name, "agg");
    EXPECT_EQ(agg[0].value.shape(), (std::vector<std::size_t>{2, 32}));
}

TEST(Cli, ExtractIsDeterministicAndEvalMatchesInProcess) {
    const auto& ws = workspace();
    const std::string model = ws.dir + "/train_out/ckpt_final.imgt";

    for (const char* role : {"query", "database"}) {
        const std::string out1 = ws.dir + "/" + role + "_1.imgd";
        const std::string out2 = ws.dir + "/" + role + "_2.imgd";
        for (const std::string& out : {out1, out2})
            ASSERT_EQ(run_cli("extract --config " + ws.config_path + " --model " + model +
                                  " --manifest " + ws.corpus + "/eval.jsonl --role " + role +
                                  " --out " + out,
                              ws.dir + "/extract.log"),
                      0)
                << slurp(ws.dir + "/extract.log");
        EXPECT_EQ(file_bytes(out1), file_bytes(out2));
    }

    const std::string report = ws.dir + "/report.json";
    ASSERT_EQ(run_cli("eval --manifest " + ws.corpus + "/eval.jsonl --query-desc " + ws.dir +
                          "/query_1.imgd --db-desc " + ws.dir + "/database_1.imgd --ns 1 5 --out " +
                          report,
                      ws.dir + "/eval.log"),
              0)
        << slurp(ws.dir + "/eval.log");
    const std::string eval_stdout = slurp(ws.dir + "/eval.log");
    EXPECT_NE(eval_stdout.find("R@1="), std::string::npos);

    // The same numbers via the in-process pipeline.
    RunConfig cfg = RunConfig::from_file(ws.config_path);
    std::optional<Tensor> agg_values;
    VitModel vit = load_checkpoint(model, cfg.backbone, &agg_values);
    ASSERT_TRUE(agg_values.has_value());
    AggTokens agg = make_agg_tokens(*agg_values);
    const PlaceManifest eval_manifest = load_manifest(ws.corpus + "/eval.jsonl");
    DescriptorPipeline pipeline{&vit, &cfg.agg, &agg, DescriptorSource::kAggTokens};
    ImageCache cache;
    const Tensor q = extract_descriptors(eval_manifest, Role::kQuery, pipeline, cache);
    const Tensor db = extract_descriptors(eval_manifest, Role::kDatabase, pipeline, cache);
    const EvalReport in_process = recall_at_n(q, db, eval_manifest, {1, 5});

    std::ifstream is(report);
    nlohmann::json j;
    is >> j;
    EXPECT_DOUBLE_EQ(j["recall_at"]["1"].get<double>(), in_process.recall_at.at(1));
    EXPECT_DOUBLE_EQ(j["recall_at"]["5"].get<double>(), in_process.recall_at.at(5));

    // The file bytes match the in-process descriptors exactly as well.
    const DescriptorSet set = load_descriptors(ws.dir + "/query_1.imgd");
    ASSERT_EQ(set.count, q.rows());
    for (std::size_t i = 0; i < q.numel(); ++i) EXPECT_EQ(set.values[i], q.at(i));
}

TEST(Cli, EvalOnDuplicatedQueriesPrintsPerfectRecall) {
    const auto& ws = workspace();
    // Database descriptors identical to the queries, one per query, each
    // within threshold: R@1 must print as 1.000.
    PlaceManifest m;
    m.kind = PositionKind::kMeters;
    m.threshold_m = 25.0;
    DescriptorSet set;
    set.count = 4;
    set.dim = 4;
    for (int i = 0; i < 4; ++i) {
        PlaceRecord q;
        q.id = i;
        q.path = "q.ppm";
        q.role = Role::kQuery;
        q.easting_m = 1000.0 * i;
        m.records.push_back(q);
        PlaceRecord db = q;
        db.id = 100 + i;
        db.role = Role::kDatabase;
        m.records.push_back(db);
        for (int c = 0; c < 4; ++c) set.values.push_back(c == i ? 1.0 : 0.0);
    }
    const std::string manifest_path = ws.dir + "/dup.jsonl";
    save_manifest(m, manifest_path);
    save_descriptors(ws.dir + "/dup.imgd", set);

    const std::string log = ws.dir + "/dup_eval.log";
    ASSERT_EQ(run_cli("eval --manifest " + manifest_path + " --query-desc " + ws.dir +
                          "/dup.imgd --db-desc " + ws.dir + "/dup.imgd --ns 1",
                      log),
              0)
        << slurp(log);
    EXPECT_NE(slurp(log).find("R@1=1.000"), std::string::npos) << slurp(log);
}

TEST(Cli, AttnMapWritesMapsAndCsv) {
    const auto& ws = workspace();
    const std::string out = ws.dir + "/maps";
    ASSERT_EQ(run_cli("attn-map --config " + ws.config_path + " --model " + ws.dir +
                          "/train_out/ckpt_final.imgt --image " + ws.corpus +
                          "/images/p000_v0.ppm --out " + out,
                      ws.dir + "/attn.log"),
              0)
        << slurp(ws.dir + "/attn.log");
    EXPECT_TRUE(fs::exists(out + "/agg_token00.pgm"));
    EXPECT_TRUE(fs::exists(out + "/agg_token01.pgm"));
    EXPECT_TRUE(fs::exists(out + "/merged.pgm"));
    EXPECT_TRUE(fs::exists(out + "/weights.csv"));
}

TEST(Cli, MissingInputFileFailsWithMessage) {
    const auto& ws = workspace();
    const std::string log = ws.dir + "/missing.log";
    EXPECT_NE(run_cli("eval --manifest /nonexistent.jsonl --query-desc x --db-desc y", log), 0);
    EXPECT_NE(slurp(log).find("error:"), std::string::npos);
}

TEST(Cli, TrainingLogHasPinnedColumns) {
    const auto& ws = workspace();
    std::ifstream csv(ws.dir + "/train_out/training_log.csv");
    std::string header;
    ASSERT_TRUE(std::getline(csv, header));
    EXPECT_EQ(header, "step,epoch,lr,loss");
    std::string first;
    ASSERT_TRUE(std::getline(csv, first));
    int commas = 0;
    for (char c : first)
        if (c == ',') ++commas;
    EXPECT_EQ(commas, 3);
}
