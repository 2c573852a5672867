#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ape/config.hpp"
#include "ape/dataset.hpp"
#include "ape/eval.hpp"
#include "ape/svg.hpp"
#include "ape/train.hpp"

namespace fs = std::filesystem;
using namespace ape;

namespace {

struct Cli {
    std::string config_path;
    std::string out = ".";
    std::int64_t seed = 0;
    int workers = 0;
    bool seed_set = false;
    bool workers_set = false;

    std::string data;
    std::string maps;
    std::string checkpoint;
    bool resume = false;
};

/// Config file first, then explicit flags override it.
ExperimentConfig effective_config(const Cli& cli) {
    ExperimentConfig cfg;
    if (!cli.config_path.empty()) cfg = config::load(cli.config_path);
    if (cli.seed_set) cfg.seed = std::uint64_t(cli.seed);
    if (cli.workers_set) cfg.workers = cli.workers;
    cfg.train.seed = cfg.seed;
    cfg.train.workers = cfg.workers;
    cfg.embed.workers = cfg.workers;
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    ape::detail::write_file(path, text);
}

// ------------------------------------------------------------ shared loaders

struct EvalData {
    std::vector<std::string> ids;
    std::vector<EmbeddingMap> maps;
    std::vector<std::vector<OrganLandmarks>> landmarks;
};

EvalData load_eval_data(const std::string& data_dir, const std::string& maps_dir) {
    EvalData d;
    d.ids = dataset::read_index(data_dir);
    if (d.ids.empty()) throw config_error("eval: empty dataset index in " + data_dir);
    for (const auto& id : d.ids) {
        const std::string map_path = maps_dir + "/" + id + ".apem";
        if (!fs::exists(map_path))
            throw config_error("eval: missing embedding map " + map_path +
                               " (run `ape embed` first)");
        d.maps.push_back(load_embedding_map(map_path));
        d.landmarks.push_back(dataset::load_sample_landmarks(data_dir, id));
    }
    return d;
}

std::vector<std::string> organ_order_of(const EvalData& d) {
    std::vector<std::string> order;
    for (const auto& lm : d.landmarks[0]) order.push_back(lm.label);
    return order;
}

// ------------------------------------------------------------------ commands

int cmd_generate(const Cli& cli) {
    const auto cfg = effective_config(cli);
    const auto ids = dataset::generate(cfg.train.phantom, cfg.generate_count, cfg.seed, cli.out);
    std::cout << "generate: wrote " << ids.size() << " phantoms to " << cli.out << "\n";
    return 0;
}

int cmd_train(const Cli& cli) {
    auto cfg = effective_config(cli);
    const auto result = train(cfg.train, cli.out, cli.resume);

    // quick-look loss curve next to the metrics log
    std::vector<double> xs;
    std::vector<double> loss, dist;
    for (std::size_t i = 0; i < result.history.size(); ++i) {
        xs.push_back(double(i + 1));
        loss.push_back(result.history[i].loss);
        dist.push_back(result.history[i].loss_dist);
    }
    if (!xs.empty())
        write_text(cli.out + "/loss_curve.svg",
                   svg::line_plot(xs, {{"loss", loss}, {"loss_dist", dist}}, "training loss",
                                  "step", "loss"));
    std::cout << "train: " << variant_name(cfg.train.variant) << " checkpoint at "
              << result.checkpoint_path << "\n";
    if (!result.history.empty())
        std::cout << "train: final loss " << eval::format_num(result.history.back().loss) << "\n";
    return 0;
}

int cmd_embed(const Cli& cli) {
    const auto cfg = effective_config(cli);
    if (cli.checkpoint.empty()) throw config_error("embed: --checkpoint is required");
    if (cli.data.empty()) throw config_error("embed: --data is required");
    Model m;
    load_checkpoint(cli.checkpoint, m, nullptr); // throws on unreadable/corrupt files
    fs::create_directories(cli.out);

    const auto ids = dataset::read_index(cli.data);
    std::int64_t voxels = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& id : ids) {
        const Volume v = dataset::load_sample_volume(cli.data, id);
        const EmbeddingMap map = sliding_window_embed(m, v, cfg.embed);
        save_embedding_map(map, cli.out + "/" + id + ".apem");
        voxels += volume_of(v.shape);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "embed: " << ids.size() << " volumes, " << voxels << " voxels in "
              << eval::format_num(secs) << " s ("
              << eval::format_num(secs > 0 ? double(voxels) / secs : 0.0) << " voxels/s)\n";
    return 0;
}

int cmd_eval_retrieval(const Cli& cli) {
    if (cli.data.empty() || cli.maps.empty())
        throw config_error("eval-retrieval: --data and --maps are required");
    const auto d = load_eval_data(cli.data, cli.maps);

    eval::RetrievalInputs in;
    in.ids = d.ids;
    for (const auto& m : d.maps) in.maps.push_back(&m);
    in.landmarks = d.landmarks;
    const auto rep = eval::run_retrieval(in);

    fs::create_directories(cli.out);
    write_text(cli.out + "/retrieval_summary.csv", eval::retrieval_summary_csv(rep));
    write_text(cli.out + "/retrieval_details.csv", eval::retrieval_detail_csv(rep));
    std::vector<double> errs;
    for (const auto& r : rep.details) errs.push_back(r.error_mm);
    write_text(cli.out + "/mre_hist.svg",
               svg::histogram(errs, 20, "retrieval radial errors", "error (mm)"));
    std::cout << "eval-retrieval: " << rep.details.size() << " pairs, MRE "
              << eval::format_num(rep.overall.mean) << " +- "
              << eval::format_num(rep.overall.stddev) << " mm\n";
    return 0;
}

int cmd_eval_localization(const Cli& cli) {
    const auto cfg = effective_config(cli);
    if (cli.data.empty() || cli.maps.empty())
        throw config_error("eval-localization: --data and --maps are required");
    const auto d = load_eval_data(cli.data, cli.maps);
    const auto organs = organ_order_of(d);

    // masks stay owned here; the report only borrows them
    std::vector<std::vector<std::unique_ptr<Mask>>> owned(d.ids.size());
    eval::LocalizationInputs in;
    in.ids = d.ids;
    for (const auto& m : d.maps) in.maps.push_back(&m);
    in.landmarks = d.landmarks;
    in.organ_order = organs;
    in.shots = cfg.eval_shots;
    in.seed = cfg.seed;
    in.masks.resize(d.ids.size());
    for (std::size_t v = 0; v < d.ids.size(); ++v) {
        for (const auto& organ : organs) {
            std::unique_ptr<Mask> mask;
            if (fs::exists(dataset::mask_base(cli.data, d.ids[v], organ) + ".raw"))
                mask = std::make_unique<Mask>(dataset::load_sample_mask(cli.data, d.ids[v], organ));
            in.masks[v].push_back(mask.get());
            owned[v].push_back(std::move(mask));
        }
    }
    const auto rep = eval::run_localization(in);

    fs::create_directories(cli.out);
    write_text(cli.out + "/localization_summary.csv", eval::localization_summary_csv(rep));
    write_text(cli.out + "/localization_details.csv", eval::localization_detail_csv(rep));
    std::cout << "eval-localization: " << rep.details.size() << " cases, mean IoU "
              << eval::format_num(rep.mean_iou) << "\n";
    return 0;
}

int cmd_export_centers(const Cli& cli) {
    if (cli.data.empty() || cli.maps.empty())
        throw config_error("export-centers: --data and --maps are required");
    const auto d = load_eval_data(cli.data, cli.maps);
    const auto organs = organ_order_of(d);

    std::vector<std::vector<OrganCenter>> centers(d.ids.size());
    for (std::size_t v = 0; v < d.ids.size(); ++v)
        for (const auto& lm : d.landmarks[v]) centers[v].push_back({lm.label, lm.center_mm});

    std::vector<const EmbeddingMap*> maps;
    for (const auto& m : d.maps) maps.push_back(&m);
    std::vector<std::string> warnings;
    const auto csv = export_center_embeddings(d.ids, maps, centers, organs, &warnings);
    for (const auto& w : warnings) std::cerr << "export-centers: " << w << "\n";

    fs::create_directories(cli.out);
    write_text(cli.out + "/center_embeddings.csv", csv);

    // first-two-channel projection of the organ-center clusters
    std::vector<svg::ScatterPoint> pts;
    for (std::size_t v = 0; v < d.ids.size(); ++v)
        for (std::size_t o = 0; o < organs.size(); ++o)
            for (const auto& c : centers[v])
                if (c.label == organs[o]) {
                    const fvec3 e = query_embedding(d.maps[v], c.center_mm);
                    pts.push_back({double(e[0]), double(e[1]), int(o)});
                }
    write_text(cli.out + "/centers_scatter.svg",
               svg::scatter(pts, organs, "organ-center embeddings", "e1", "e2"));
    std::cout << "export-centers: " << pts.size() << " rows to " << cli.out
              << "/center_embeddings.csv\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"anatomical positional embeddings: synthetic pipeline"};
    app.require_subcommand(1);

    Cli cli;
    app.add_option("--config", cli.config_path, "key=value config file");
    auto* seed_opt = app.add_option("--seed", cli.seed, "override the config seed");
    app.add_option("--out", cli.out, "output directory");
    auto* workers_opt = app.add_option("--workers", cli.workers, "override the worker count");

    auto* generate = app.add_subcommand("generate", "write a phantom dataset");
    auto* train = app.add_subcommand("train", "train a model on generated phantoms");
    train->add_flag("--resume", cli.resume, "continue from an existing checkpoint");
    auto* embed = app.add_subcommand("embed", "compute embedding maps for a dataset");
    embed->add_option("--checkpoint", cli.checkpoint, "trained model checkpoint");
    embed->add_option("--data", cli.data, "dataset directory");
    auto* eval_retrieval = app.add_subcommand("eval-retrieval", "landmark retrieval MRE");
    auto* eval_localization =
        app.add_subcommand("eval-localization", "few-shot box localization IoU and VR@99");
    auto* export_centers =
        app.add_subcommand("export-centers", "organ-center embedding table and scatter");
    for (auto* sub : {eval_retrieval, eval_localization, export_centers}) {
        sub->add_option("--data", cli.data, "dataset directory");
        sub->add_option("--maps", cli.maps, "embedding map directory");
    }
    for (auto* sub : {generate, train, embed, eval_retrieval, eval_localization, export_centers})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
        cli.seed_set = seed_opt->count() > 0;
        cli.workers_set = workers_opt->count() > 0;
        if (generate->parsed()) return cmd_generate(cli);
        if (train->parsed()) return cmd_train(cli);
        if (embed->parsed()) return cmd_embed(cli);
        if (eval_retrieval->parsed()) return cmd_eval_retrieval(cli);
        if (eval_localization->parsed()) return cmd_eval_localization(cli);
        if (export_centers->parsed()) return cmd_export_centers(cli);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
