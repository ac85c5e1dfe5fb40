// Command-line front end: data generation, pre-training, fine-tuning,
// k-fold, evaluation, the cross-modality experiment and attention export.
// Exit codes: 0 success, 1 runtime failure (single "error:" line), 2 usage.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "sfuse/checkpoint.hpp"
#include "sfuse/config.hpp"
#include "sfuse/metrics.hpp"
#include "sfuse/model.hpp"
#include "sfuse/ood.hpp"
#include "sfuse/phantom.hpp"
#include "sfuse/train.hpp"

namespace fs = std::filesystem;
using namespace sfuse;

namespace {

struct GlobalFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool verbose = false;
    bool force = false;
};

TrainConfig resolve_config(const GlobalFlags& flags) {
    TrainConfig cfg;
    if (!flags.config_path.empty()) cfg = load_config_file(flags.config_path);
    if (flags.seed_given) cfg.seed = flags.seed;
    cfg.validate();
    return cfg;
}

void echo_config(const TrainConfig& cfg) {
    std::cout << canonical_config_text(cfg);
    std::cout.flush();
}

std::vector<Volume> load_dataset(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".sfv")
            paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw ContractError("no .sfv volumes found in '" + dir + "'");
    std::vector<Volume> out;
    out.reserve(paths.size());
    for (const auto& p : paths) out.push_back(read_volume(p));
    return out;
}

void warn_single_modality(const std::vector<Volume>& data) {
    bool ct = false, mr = false;
    for (const auto& v : data) {
        ct = ct || v.modality == Modality::ct_like;
        mr = mr || v.modality == Modality::mr_like;
    }
    if (!(ct && mr))
        std::cerr << "warning: dataset has a single modality; the divergence term still "
                     "compares the two augmented views\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing", 0);
    out << text;
    if (!out) throw FormatError("short write to '" + path + "'", 0);
}

int run(int argc, char** argv) {
    CLI::App app{"desk-scale multi-modal self-supervised 3D segmentation"};
    app.require_subcommand(1);
    app.fallthrough(false);

    GlobalFlags flags;
    // global flags are registered per subcommand so they can follow it
    auto add_common = [&flags](CLI::App* sub) {
        sub->add_option("--config", flags.config_path, "key=value config file");
        sub->add_option("--seed", flags.seed, "master seed (overrides config)")
            ->each([&flags](const std::string&) { flags.seed_given = true; });
        sub->add_flag("--verbose", flags.verbose, "progress logging");
        sub->add_flag("--force", flags.force, "ignore checkpoint fingerprint mismatch");
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "emit paired CT-like/MR-like phantom volumes");
    std::string gen_dims = "32,32,32", gen_out;
    int gen_organs = 3, gen_cases = 4;
    std::uint64_t gen_transfer = 1;
    double gen_noise = -1, gen_bias = -1;
    add_common(gen);
    gen->add_option("--dims", gen_dims, "volume extents X,Y,Z")->capture_default_str();
    gen->add_option("--organs", gen_organs, "number of organ classes")->capture_default_str();
    gen->add_option("--cases", gen_cases, "number of registered pairs")->capture_default_str();
    gen->add_option("--transfer", gen_transfer, "transfer function id")->capture_default_str();
    gen->add_option("--noise", gen_noise, "override noise sigma");
    gen->add_option("--bias", gen_bias, "override MR bias amplitude");
    gen->add_option("--out", gen_out, "output directory")->required();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training");
    std::string pre_data, pre_out, pre_log;
    add_common(pre);
    pre->add_option("--data", pre_data, "directory of .sfv volumes")->required();
    pre->add_option("--out", pre_out, "checkpoint path")->required();
    pre->add_option("--log", pre_log, "loss CSV path");

    // finetune
    auto* ft = app.add_subcommand("finetune", "supervised segmentation fine-tuning");
    std::string ft_data, ft_out, ft_log, ft_init;
    add_common(ft);
    ft->add_option("--data", ft_data, "directory of labeled .sfv volumes")->required();
    ft->add_option("--init", ft_init, "pre-trained checkpoint to start from");
    ft->add_option("--out", ft_out, "checkpoint path")->required();
    ft->add_option("--log", ft_log, "metric CSV path");

    // kfold
    auto* kf = app.add_subcommand("kfold", "k-fold cross-validation fine-tuning");
    std::string kf_data, kf_out, kf_init;
    int kf_k = 5;
    add_common(kf);
    kf->add_option("--k", kf_k, "fold count")->capture_default_str();
    kf->add_option("--data", kf_data, "directory of labeled .sfv volumes")->required();
    kf->add_option("--init", kf_init, "pre-trained checkpoint to start from");
    kf->add_option("--out", kf_out, "per-fold CSV path")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on labeled volumes");
    std::string ev_ckpt, ev_data, ev_out;
    add_common(ev);
    ev->add_option("--checkpoint", ev_ckpt, "fine-tuned checkpoint")->required();
    ev->add_option("--data", ev_data, "directory of labeled .sfv volumes")->required();
    ev->add_option("--out", ev_out, "Dice CSV path")->required();

    // ood
    auto* ood = app.add_subcommand("ood", "cross-modality transfer experiment");
    std::string ood_out, ood_ckpt_out, ood_init;
    OodOptions ood_opt;
    add_common(ood);
    ood->add_option("--out", ood_out, "report CSV path")->required();
    ood->add_option("--init", ood_init, "reuse a pre-trained checkpoint");
    ood->add_option("--save-checkpoint", ood_ckpt_out, "save the pre-training product");
    ood->add_option("--vol-dim", ood_opt.vol_dim, "phantom side")->capture_default_str();
    ood->add_option("--pretrain-steps", ood_opt.pretrain_steps)->capture_default_str();
    ood->add_option("--finetune-steps", ood_opt.finetune_steps)->capture_default_str();
    ood->add_option("--pretrain-cases", ood_opt.n_pretrain_cases)->capture_default_str();
    ood->add_option("--ft-cases", ood_opt.n_ft_cases)->capture_default_str();
    ood->add_option("--test-cases", ood_opt.n_test_cases)->capture_default_str();

    // export-attn
    auto* ex = app.add_subcommand("export-attn", "export an attention relevance volume");
    std::string ex_ckpt, ex_input, ex_out;
    int ex_layer = 0, ex_head = 0, ex_stream = 1;
    add_common(ex);
    ex->add_option("--checkpoint", ex_ckpt, "checkpoint with embedding+DIM weights")->required();
    ex->add_option("--input", ex_input, "input .sfv volume")->required();
    ex->add_option("--layer", ex_layer, "DIM layer index")->required();
    ex->add_option("--head", ex_head, "attention head index")->required();
    ex->add_option("--stream", ex_stream, "DIM stream (1 or 2)")->capture_default_str();
    ex->add_option("--out", ex_out, "output .sfv relevance map")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cerr << app.help();
        return 2;
    }

    std::ostream* info = flags.verbose ? &std::cerr : nullptr;

    if (gen->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        int dx = 0, dy = 0, dz = 0;
        if (std::sscanf(gen_dims.c_str(), "%d,%d,%d", &dx, &dy, &dz) != 3)
            throw ConfigError("--dims expects X,Y,Z, got '" + gen_dims + "'");
        PhantomOptions opt;
        if (gen_noise >= 0) opt.noise_sigma = gen_noise;
        if (gen_bias >= 0) opt.bias_amplitude = gen_bias;
        fs::create_directories(gen_out);
        for (int i = 0; i < gen_cases; ++i) {
            const std::uint64_t case_seed =
                derive_seed(cfg.seed, 0x47454e44) + static_cast<std::uint64_t>(i);
            for (Modality m : {Modality::ct_like, Modality::mr_like}) {
                const Volume v = gen_phantom(case_seed, dx, dy, dz, gen_organs, m, gen_transfer, opt);
                const std::string path = (fs::path(gen_out) /
                                          ("case" + std::to_string(i) + "_" + modality_name(m) + ".sfv"))
                                             .string();
                write_volume(v, path);
                if (info) *info << "wrote " << path << "\n";
            }
        }
        return 0;
    }

    if (pre->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        echo_config(cfg);
        auto data = load_dataset(pre_data);
        warn_single_modality(data);
        const PretrainResult result = pretrain_loop(cfg, data, info);
        save_checkpoint(pre_out, result.params, config_fingerprint(cfg));
        if (!pre_log.empty()) write_text(pre_log, result.csv);
        std::cout << "final total loss " << format_sig9(result.last.total) << "\n";
        return 0;
    }

    if (ft->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        echo_config(cfg);
        auto data = load_dataset(ft_data);
        CheckpointData ck;
        const CheckpointData* init = nullptr;
        if (!ft_init.empty()) {
            ck = load_checkpoint(ft_init);
            init = &ck;
        }
        const FinetuneResult result = finetune_loop(cfg, data, init, flags.force, info);
        save_checkpoint(ft_out, result.params, config_fingerprint(cfg));
        if (!ft_log.empty()) write_text(ft_log, result.csv);
        std::cout << "final train dice " << format_sig9(result.final_train_dice) << "\n";
        return 0;
    }

    if (kf->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        echo_config(cfg);
        auto data = load_dataset(kf_data);
        CheckpointData ck;
        const CheckpointData* init = nullptr;
        if (!kf_init.empty()) {
            ck = load_checkpoint(kf_init);
            init = &ck;
        }
        const KfoldResult result = kfold(cfg, data, kf_k, init, flags.force, info);
        std::string csv = "fold,mean_dice\n";
        for (std::size_t f = 0; f < result.fold_dice.size(); ++f)
            csv += std::to_string(f) + "," + format_sig6(result.fold_dice[f]) + "\n";
        csv += "mean," + format_sig6(result.mean_dice) + "\n";
        write_text(kf_out, csv);
        std::cout << "mean dice " << format_sig6(result.mean_dice) << "\n";
        return 0;
    }

    if (ev->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        echo_config(cfg);
        const CheckpointData ck = load_checkpoint(ev_ckpt);
        if (ck.fingerprint != config_fingerprint(cfg) && !flags.force)
            throw ConfigError("checkpoint fingerprint does not match config (use --force)");
        auto data = load_dataset(ev_data);
        std::vector<DiceReport> reports;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (!data[i].has_labels())
                throw ContractError("eval volume " + std::to_string(i) + " lacks labels");
            const auto pred = predict_labels(ck.params, cfg, data[i]);
            reports.push_back(dice_report("case" + std::to_string(i), pred, data[i].labels,
                                          cfg.n_classes));
            if (info) *info << reports.back().case_id << " mean dice " << reports.back().mean << "\n";
        }
        emit_dice_report(reports, ev_out);
        double mean = 0;
        for (const auto& r : reports) mean += r.mean;
        std::cout << "mean dice " << format_sig6(mean / reports.size()) << "\n";
        return 0;
    }

    if (ood->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        echo_config(cfg);
        CheckpointData ck;
        const CheckpointData* init = nullptr;
        if (!ood_init.empty()) {
            ck = load_checkpoint(ood_init);
            init = &ck;
        }
        const OodResult result = ood_experiment(cfg, ood_opt, info, init);
        emit_ood_report(result.rows, ood_out);
        if (!ood_ckpt_out.empty())
            save_checkpoint(ood_ckpt_out, result.pretrained, config_fingerprint(cfg));
        for (const auto& row : result.rows)
            if (row.variant == "pretrained")
                std::cout << row.test_region << " delta " << format_sig6(row.delta) << "\n";
        return 0;
    }

    if (ex->parsed()) {
        TrainConfig cfg = resolve_config(flags);
        echo_config(cfg);
        const CheckpointData ck = load_checkpoint(ex_ckpt);
        if (ck.fingerprint != config_fingerprint(cfg) && !flags.force)
            throw ConfigError("checkpoint fingerprint does not match config (use --force)");
        const Volume input = read_volume(ex_input);
        // deterministic center crop of the normalized, padded volume
        Volume normalized = input;
        normalize_volume(normalized);
        const Volume padded = pad_to_min_extent(normalized, cfg.S);
        SubVolume sv = crop_subvolume_at(padded, cfg.S, (padded.dx - cfg.S) / 2,
                                         (padded.dy - cfg.S) / 2, (padded.dz - cfg.S) / 2);
        const AugmentedView view = identity_view(sv);
        Graph<float> g;
        ParamBinding<float> bind(g, ck.params, /*trainable=*/false);
        auto p1 = embed_view(g, view.voxels, bind, cfg);
        auto p2 = embed_view(g, view.voxels, bind, cfg);
        auto dim = dim_forward(g, p1, p2, bind, cfg);
        Volume map = export_attention(g, dim, ex_stream, ex_layer, ex_head,
                                      TokenGeometry(cfg.S, cfg.P, cfg.C), input.modality);
        map.sx = input.sx;
        map.sy = input.sy;
        map.sz = input.sz;
        write_volume(map, ex_out);
        std::cout << "wrote " << ex_out << "\n";
        return 0;
    }

    std::cerr << "error: no subcommand\n";
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
