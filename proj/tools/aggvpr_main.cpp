// Command-line front end wiring the library into reproducible experiments:
// synthetic corpus generation, token initialization, training, descriptor
// extraction, retrieval evaluation, attention-map dumps and ablation sweeps.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "aggvpr/aggregation.hpp"
#include "aggvpr/manifest.hpp"
#include "aggvpr/retrieval.hpp"
#include "aggvpr/run_config.hpp"
#include "aggvpr/synth.hpp"
#include "aggvpr/tensor_io.hpp"
#include "aggvpr/token_init.hpp"
#include "aggvpr/training.hpp"
#include "aggvpr/version.hpp"
#include "aggvpr/vit.hpp"

namespace {

using namespace aggvpr;

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::from_file(path);
    for (const std::string& kv : overrides) cfg.apply_override(kv);
    cfg.backbone.validate();
    return cfg;
}

VitModel make_model(const RunConfig& cfg, const std::string& model_path,
                    std::optional<Tensor>* agg_from_ckpt) {
    const int pos_tokens = cfg.backbone.pos_embed_on_agg ? cfg.agg.num_tokens : 0;
    if (!model_path.empty())
        return load_checkpoint(model_path, cfg.backbone, agg_from_ckpt, pos_tokens);
    agg_from_ckpt->reset();
    return VitModel::random_init(cfg.backbone, cfg.seed, pos_tokens);
}

Tensor load_agg_archive(const std::string& path) {
    for (NamedTensor& nt : load_tensor_archive(path))
        if (nt.name == "agg") return nt.value;
    throw SchemaError(path + ": no entry named agg");
}

/// Descriptor extraction over a manifest role, fanned out over worker
/// threads; rows land in manifest order regardless of completion order.
Tensor extract_role(const PlaceManifest& manifest, Role role, const DescriptorPipeline& pipeline,
                    int threads) {
    const auto recs = manifest.with_role(role);
    if (recs.empty()) throw DataError("extract: no records with requested role");
    std::size_t dim = 0;
    {
        InferenceScope inference;
        dim = pipeline.descriptor(image_to_tensor(read_ppm(recs[0]->path))).numel();
    }
    Tensor out = Tensor::zeros({recs.size(), dim});
    double* po = out.mutable_data().data();
    auto worker = [&](std::size_t begin, std::size_t end) {
        InferenceScope inference;
        for (std::size_t i = begin; i < end; ++i) {
            const Tensor d = pipeline.descriptor(image_to_tensor(read_ppm(recs[i]->path)));
            std::copy(d.data().begin(), d.data().end(), po + i * dim);
        }
    };
    const int n = std::max(1, threads);
    if (n == 1) {
        worker(0, recs.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (recs.size() + n - 1) / n;
        for (int t = 0; t < n; ++t) {
            const std::size_t b = t * chunk, e = std::min(recs.size(), b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

DescriptorSet to_descriptor_set(const Tensor& rows) {
    DescriptorSet set;
    set.count = static_cast<std::uint32_t>(rows.rows());
    set.dim = static_cast<std::uint32_t>(rows.cols());
    set.values.assign(rows.data().begin(), rows.data().end());
    return set;
}

Tensor to_tensor(const DescriptorSet& set) {
    return Tensor::from_data({set.count, set.dim}, set.values);
}

// --- subcommands -----------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
    const SynthSpec spec = spec_path.empty() ? SynthSpec{} : synth_spec_from_file(spec_path);
    const SynthResult result = generate(spec, out_dir);
    std::cout << "wrote " << result.eval_manifest.records.size() << " images ("
              << result.eval_manifest.with_role(Role::kQuery).size() << " queries, "
              << result.eval_manifest.with_role(Role::kDatabase).size() << " database) to "
              << out_dir << "\n";
    return 0;
}

int cmd_init_tokens(const RunConfig& cfg, const std::string& model_path,
                    const std::string& manifest_path, const std::string& out_path) {
    std::optional<Tensor> agg_ignored;
    const VitModel model = make_model(cfg, model_path, &agg_ignored);
    const PlaceManifest manifest = load_manifest(manifest_path);
    const AggTokens agg = init_agg_tokens(model, cfg.agg, manifest, cfg.seed, cfg.token_init);
    save_tensor_archive(out_path, {{"agg", agg.values}});
    std::cout << "wrote " << agg.count() << " tokens (" << to_string(cfg.agg.init) << ") to "
              << out_path << "\n";
    return 0;
}

int cmd_train(RunConfig cfg, const std::string& manifest_path, const std::string& val_path,
              const std::string& model_path, const std::string& agg_path,
              const std::string& out_dir) {
    const PlaceManifest manifest = load_manifest(manifest_path);
    std::optional<PlaceManifest> val;
    if (!val_path.empty()) val = load_manifest(val_path);

    std::optional<Tensor> agg_from_ckpt;
    VitModel model = make_model(cfg, model_path, &agg_from_ckpt);
    AggTokens agg = [&] {
        if (!agg_path.empty()) return make_agg_tokens(load_agg_archive(agg_path));
        if (agg_from_ckpt) return make_agg_tokens(*agg_from_ckpt);
        return init_agg_tokens(model, cfg.agg, manifest, cfg.seed, cfg.token_init);
    }();
    if (agg.count() != cfg.agg.num_tokens)
        throw ContractError("agg token count " + std::to_string(agg.count()) +
                            " does not match config agg_tokens " +
                            std::to_string(cfg.agg.num_tokens));

    cfg.train.seed = cfg.seed;
    TrainOptions opts;
    opts.out_dir = out_dir;
    opts.source = cfg.descriptor_source;
    const TrainingLog log =
        train(model, agg, manifest, val ? &*val : nullptr, cfg.train, cfg.agg, opts);
    save_checkpoint(out_dir + "/ckpt_final.imgt", model, &agg.values);
    cfg.to_file(out_dir + "/run_config.cfg");
    if (!log.rows.empty())
        std::cout << "trained " << log.rows.size() << " steps, final loss "
                  << log.rows.back().loss << "\n";
    if (log.best_epoch >= 0)
        std::cout << "best val R@1 " << log.best_recall1 << " at epoch " << log.best_epoch << "\n";
    return 0;
}

int cmd_extract(const RunConfig& cfg, const std::string& model_path,
                const std::string& manifest_path, const std::string& role_name,
                const std::string& out_path) {
    const PlaceManifest manifest = load_manifest(manifest_path);
    std::optional<Tensor> agg_from_ckpt;
    const VitModel model = make_model(cfg, model_path, &agg_from_ckpt);
    AggTokens agg;
    if (cfg.descriptor_source == DescriptorSource::kAggTokens) {
        if (!cfg.agg_checkpoint.empty())
            agg = make_agg_tokens(load_agg_archive(cfg.agg_checkpoint));
        else if (agg_from_ckpt)
            agg = make_agg_tokens(*agg_from_ckpt);
        else
            throw ContractError(
                "extract: no aggregation tokens; pass a trained checkpoint or set "
                "agg_checkpoint (see init-tokens)");
    }
    const DescriptorPipeline pipeline{&model, &cfg.agg, &agg, cfg.descriptor_source};

    if (role_name == "all") {
        // One file covering every record in manifest order.
        std::size_t dim = 0;
        {
            InferenceScope inference;
            dim = pipeline.descriptor(image_to_tensor(read_ppm(manifest.records[0].path))).numel();
        }
        Tensor rows = Tensor::zeros({manifest.records.size(), dim});
        double* po = rows.mutable_data().data();
        InferenceScope inference;
        for (std::size_t i = 0; i < manifest.records.size(); ++i) {
            const Tensor d = pipeline.descriptor(image_to_tensor(read_ppm(manifest.records[i].path)));
            std::copy(d.data().begin(), d.data().end(), po + i * dim);
        }
        save_descriptors(out_path, to_descriptor_set(rows));
        std::cout << "wrote " << manifest.records.size() << " descriptors of dim " << dim << "\n";
        return 0;
    }
    const Role role = role_name == "query" ? Role::kQuery : Role::kDatabase;
    const Tensor rows = extract_role(manifest, role, pipeline, cfg.threads);
    save_descriptors(out_path, to_descriptor_set(rows));
    std::cout << "wrote " << rows.rows() << " descriptors of dim " << rows.cols() << "\n";
    return 0;
}

int cmd_eval(const std::string& manifest_path, const std::string& query_path,
             const std::string& db_path, const std::string& out_path,
             const std::vector<int>& ns, bool count_missing_as_fail) {
    const PlaceManifest manifest = load_manifest(manifest_path);
    const Tensor q = to_tensor(load_descriptors(query_path));
    const Tensor db = to_tensor(load_descriptors(db_path));
    const EvalReport report = recall_at_n(
        q, db, manifest, ns,
        count_missing_as_fail ? NoPositivePolicy::kCountAsFail : NoPositivePolicy::kExclude);
    print_eval_report(report);
    if (!out_path.empty()) write_eval_report(report, out_path);
    return 0;
}

int cmd_attn_map(const RunConfig& cfg, const std::string& model_path,
                 const std::string& image_path, const std::string& out_dir, bool per_head) {
    std::optional<Tensor> agg_from_ckpt;
    const VitModel model = make_model(cfg, model_path, &agg_from_ckpt);
    AggTokens agg;
    if (!cfg.agg_checkpoint.empty())
        agg = make_agg_tokens(load_agg_archive(cfg.agg_checkpoint));
    else if (agg_from_ckpt)
        agg = make_agg_tokens(*agg_from_ckpt);
    else
        throw ContractError("attn-map: no aggregation tokens in checkpoint or agg_checkpoint");
    const Tensor image = image_to_tensor(read_ppm(image_path));
    dump_attention_maps(image, model, cfg.agg, agg, out_dir, per_head);
    std::cout << "wrote " << agg.count() << " token maps + merged map to " << out_dir << "\n";
    return 0;
}

struct AblateRow {
    std::string variant;
    double r1, r5, r10;
    double train_time_s;
};

AblateRow run_ablate_variant(RunConfig cfg, const std::string& variant,
                             const PlaceManifest& train_manifest, const PlaceManifest& val) {
    std::optional<Tensor> ignored;
    VitModel model = make_model(cfg, "", &ignored);
    AggTokens agg;
    const bool cls_baseline = variant == "cls";
    if (cls_baseline) {
        cfg.descriptor_source = DescriptorSource::kClassToken;
        agg = make_agg_tokens(Tensor::zeros(
            {1, static_cast<std::size_t>(cfg.backbone.embed_dim)}));
    } else {
        agg = init_agg_tokens(model, cfg.agg, train_manifest, cfg.seed, cfg.token_init);
    }
    cfg.train.seed = cfg.seed;
    TrainOptions opts;
    opts.source = cfg.descriptor_source;
    opts.write_checkpoints = false;
    opts.validate_every = 1 << 20;  // skip mid-training validation
    opts.quiet = true;

    const auto t0 = std::chrono::steady_clock::now();
    train(model, agg, train_manifest, nullptr, cfg.train, cfg.agg, opts);
    const double train_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const DescriptorPipeline pipeline{&model, &cfg.agg, &agg, cfg.descriptor_source};
    ImageCache cache;
    const Tensor q = extract_descriptors(val, Role::kQuery, pipeline, cache);
    const Tensor db = extract_descriptors(val, Role::kDatabase, pipeline, cache);
    const EvalReport report = recall_at_n(q, db, val, {1, 5, 10});
    return {variant, report.recall_at.at(1), report.recall_at.at(5), report.recall_at.at(10),
            train_time};
}

int cmd_ablate(const RunConfig& base, const std::string& sweep, const std::string& manifest_path,
               const std::string& val_path, const std::string& out_path) {
    const PlaceManifest train_manifest = load_manifest(manifest_path);
    const PlaceManifest val = load_manifest(val_path);

    std::vector<AblateRow> rows;
    if (sweep == "strategy") {
        for (InsertStrategy s :
             {InsertStrategy::kFrontFrozen, InsertStrategy::kFrontAllTrainable,
              InsertStrategy::kJunction, InsertStrategy::kDeep, InsertStrategy::kProgressive}) {
            RunConfig cfg = base;
            cfg.agg.strategy = s;
            rows.push_back(run_ablate_variant(cfg, to_string(s), train_manifest, val));
            std::cerr << "strategy " << to_string(s) << " R@1 " << rows.back().r1 << "\n";
        }
    } else if (sweep == "init") {
        for (InitMethod m : {InitMethod::kZero, InitMethod::kNormal, InitMethod::kCenters,
                             InitMethod::kCentersL2n}) {
            RunConfig cfg = base;
            cfg.agg.init = m;
            rows.push_back(run_ablate_variant(cfg, to_string(m), train_manifest, val));
            std::cerr << "init " << to_string(m) << " R@1 " << rows.back().r1 << "\n";
        }
    } else if (sweep == "tokens") {
        rows.push_back(run_ablate_variant(base, "cls", train_manifest, val));
        std::cerr << "tokens cls R@1 " << rows.back().r1 << "\n";
        for (int m : {1, 4, 8, 16, 32, 64}) {
            RunConfig cfg = base;
            cfg.agg.num_tokens = m;
            rows.push_back(run_ablate_variant(cfg, std::to_string(m), train_manifest, val));
            std::cerr << "tokens " << m << " R@1 " << rows.back().r1 << "\n";
        }
    } else {
        throw ContractError("ablate: unknown sweep " + sweep +
                            " (expected strategy, init or tokens)");
    }

    std::ofstream os(out_path);
    if (!os) throw IoError("cannot open " + out_path + " for writing");
    os << "variant,R@1,R@5,R@10,train_time\n";
    char buf[160];
    for (const AblateRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.2f\n", r.variant.c_str(), r.r1, r.r5,
                      r.r10, r.train_time_s);
        os << buf;
    }

    auto find_r1 = [&rows](const std::string& v) {
        for (const AblateRow& r : rows)
            if (r.variant == v) return r.r1;
        return -1.0;
    };
    if (sweep == "strategy")
        std::cout << "directional: strategy b >= strategy a: "
                  << (find_r1("b") >= find_r1("a") ? "yes" : "no") << "\n";
    if (sweep == "init")
        std::cout << "directional: centers_l2n >= zero: "
                  << (find_r1("centers_l2n") >= find_r1("zero") ? "yes" : "no") << "\n";
    std::cout << "wrote " << rows.size() << " rows to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"implicit-aggregation place-recognition experiments"};
    app.set_version_flag("--version", std::string("aggvpr ") + aggvpr::kVersion);
    app.require_subcommand(1);

    std::string config_path, spec_path, manifest_path, val_path, model_path, agg_path;
    std::string out_path, image_path, role_name = "all", sweep;
    std::vector<std::string> overrides;
    std::vector<int> ns = {1, 5, 10, 20};
    bool per_head = false, count_missing_as_fail = false;
    int threads = 0;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration file (key=value)");
        cmd->add_option("--set", overrides, "override a config key, e.g. --set lr=0.001");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic place corpus");
    synth->add_option("--spec", spec_path, "synth spec file (key=value); defaults when omitted");
    synth->add_option("--out", out_path, "output directory")->required();

    CLI::App* init_tokens =
        app.add_subcommand("init-tokens", "initialize aggregation tokens from patch clusters");
    add_config(init_tokens);
    init_tokens->add_option("--model", model_path, "backbone checkpoint (random init if omitted)");
    init_tokens->add_option("--manifest", manifest_path, "training manifest")->required();
    init_tokens->add_option("--out", out_path, "output token archive")->required();

    CLI::App* train_cmd = app.add_subcommand("train", "metric-learning fine-tuning");
    add_config(train_cmd);
    train_cmd->add_option("--manifest", manifest_path, "training manifest")->required();
    train_cmd->add_option("--val-manifest", val_path, "validation manifest (enables model selection)");
    train_cmd->add_option("--model", model_path, "starting checkpoint (random init if omitted)");
    train_cmd->add_option("--agg", agg_path, "token archive from init-tokens");
    train_cmd->add_option("--out", out_path, "output directory")->required();

    CLI::App* extract = app.add_subcommand("extract", "compute descriptors for a manifest");
    add_config(extract);
    extract->add_option("--model", model_path, "model checkpoint")->required();
    extract->add_option("--manifest", manifest_path, "manifest")->required();
    extract->add_option("--role", role_name, "all, query or database")
        ->check(CLI::IsMember({"all", "query", "database"}));
    extract->add_option("--threads", threads, "worker threads (default from config)");
    extract->add_option("--out", out_path, "output descriptor file")->required();

    CLI::App* eval = app.add_subcommand("eval", "Recall@N retrieval evaluation");
    eval->add_option("--manifest", manifest_path, "evaluation manifest")->required();
    eval->add_option("--query-desc", spec_path, "query descriptor file")->required();
    eval->add_option("--db-desc", agg_path, "database descriptor file")->required();
    eval->add_option("--out", out_path, "report JSON path");
    eval->add_option("--ns", ns, "recall cutoffs");
    eval->add_flag("--count-missing-as-fail", count_missing_as_fail,
                   "count queries without an in-threshold database image as failures");

    CLI::App* attn = app.add_subcommand("attn-map", "dump per-token attention maps");
    add_config(attn);
    attn->add_option("--model", model_path, "model checkpoint")->required();
    attn->add_option("--image", image_path, "input PPM image")->required();
    attn->add_option("--out", out_path, "output directory")->required();
    attn->add_flag("--per-head", per_head, "also write per-head maps");

    CLI::App* ablate = app.add_subcommand("ablate", "run a strategy/init/tokens sweep");
    add_config(ablate);
    ablate->add_option("--sweep", sweep, "strategy, init or tokens")->required();
    ablate->add_option("--manifest", manifest_path, "training manifest")->required();
    ablate->add_option("--val-manifest", val_path, "evaluation manifest")->required();
    ablate->add_option("--out", out_path, "output CSV")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(spec_path, out_path);
        RunConfig cfg = load_run_config(config_path, overrides);
        if (threads > 0) cfg.threads = threads;
        if (!agg_path.empty() && !eval->parsed()) cfg.agg_checkpoint = agg_path;
        if (init_tokens->parsed()) return cmd_init_tokens(cfg, model_path, manifest_path, out_path);
        if (train_cmd->parsed())
            return cmd_train(cfg, manifest_path, val_path, model_path, agg_path, out_path);
        if (extract->parsed())
            return cmd_extract(cfg, model_path, manifest_path, role_name, out_path);
        if (eval->parsed())
            return cmd_eval(manifest_path, spec_path, agg_path, out_path, ns,
                            count_missing_as_fail);
        if (attn->parsed()) return cmd_attn_map(cfg, model_path, image_path, out_path, per_head);
        if (ablate->parsed()) return cmd_ablate(cfg, sweep, manifest_path, val_path, out_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
