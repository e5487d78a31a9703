#include "rsp/cli.hpp"
#include "rsp/errors.hpp"
#include "rsp/toy.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <iostream>

namespace {

struct Common {
    std::string model, weights, image, image_dir, mode = "rsp", policy = "multilabel:0.5", target, purge = "on";
    std::string out = ".";
    std::size_t workers = 1;
    double epsilon = 1e-9;
    double tolerance = 1e-4;
};

void add_common(CLI::App* cmd, Common& c, bool images) {
    cmd->add_option("--model", c.model, "model descriptor (rsp-model/1 JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--weights", c.weights, ".rspw weight archive")->required()->check(CLI::ExistingFile);
    if (images) {
        cmd->add_option("--image", c.image, "single input image (.png or .rspw)");
        cmd->add_option("--image-dir", c.image_dir, "directory of input images");
    }
    cmd->add_option("--mode", c.mode,
                    "rsp, c-rsp (approximate contrastive variant: every other class hostile), gradcam, gradient")
        ->capture_default_str();
    cmd->add_option("--policy", c.policy, "predicted classes: multilabel:<theta> or top1")->capture_default_str();
    cmd->add_option("--target", c.target, "attribute this class only");
    cmd->add_option("--per-layer-purge", c.purge, "re-purge after every layer")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    cmd->add_option("--epsilon", c.epsilon, "division stabilizer")->capture_default_str();
    cmd->add_option("--audit-tolerance", c.tolerance, "relative conservation tolerance")->capture_default_str();
    cmd->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw rsp::InputError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().extension() == ".png" || e.path().extension() == ".rspw") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

rsp::RunManifest manifest_from(const Common& c, bool need_images) {
    rsp::RunManifest m;
    m.model_path = c.model;
    m.weights_path = c.weights;
    if (!c.image.empty()) m.images.push_back(c.image);
    if (!c.image_dir.empty()) {
        auto more = list_images(c.image_dir);
        m.images.insert(m.images.end(), more.begin(), more.end());
    }
    if (need_images && m.images.empty()) throw rsp::InputError("give --image or --image-dir");
    m.policy = rsp::PredictionPolicy::parse(c.policy);
    m.mode = rsp::parse_attribution_mode(c.mode);
    m.config.per_layer_purge = c.purge == "on";
    m.config.epsilon = c.epsilon;
    m.config.conservation_tolerance = c.tolerance;
    if (!c.target.empty()) m.target = c.target;
    m.out_dir = c.out;
    m.workers = c.workers;
    return m;
}

} // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("rsp"));
    spdlog::set_level(spdlog::level::warn);
    if (const char* level = std::getenv("RSP_LOG")) spdlog::set_level(spdlog::level::from_str(level));

    CLI::App app{"Relative sectional propagation for CNN attribution"};
    app.require_subcommand(1);

    Common attr;
    auto* attribute = app.add_subcommand("attribute", "write heatmaps and conservation audits");
    add_common(attribute, attr, true);

    Common ev;
    rsp::EvaluateOptions eopt;
    std::string eval_mode = "P", threshold = "mean";
    auto* evaluate = app.add_subcommand("evaluate", "pointing game and box IoU over an annotated set");
    add_common(evaluate, ev, false);
    evaluate->add_option("--image-dir", eopt.image_dir, "directory holding <id>.png or <id>.rspw")->required();
    evaluate->add_option("--annotations", eopt.annotations, "JSON lines box annotations")
        ->required()
        ->check(CLI::ExistingFile);
    evaluate->add_option("--eval-mode", eval_mode, "P: predicted classes, L: all labels")
        ->check(CLI::IsMember({"P", "L"}))
        ->capture_default_str();
    evaluate->add_option("--tolerance-px", eopt.tolerance_px, "pointing game tolerance")->capture_default_str();
    evaluate->add_option("--threshold", threshold, "IoU mask threshold for the headline")
        ->check(CLI::IsMember({"none", "mean"}))
        ->capture_default_str();

    Common san;
    std::uint64_t seed = 0;
    auto* sanity = app.add_subcommand("sanity", "cascading weight randomization curve");
    add_common(sanity, san, true);
    sanity->add_option("--seed", seed, "randomization seed")->capture_default_str();

    std::string toy_out = "toy";
    std::size_t toy_count = 8, toy_size = 32;
    std::uint64_t toy_seed = 1;
    auto* toy = app.add_subcommand("toy", "generate the two-quadrant toy model and data set");
    toy->add_option("--out", toy_out, "output directory")->capture_default_str();
    toy->add_option("--count", toy_count, "number of images")->capture_default_str();
    toy->add_option("--size", toy_size, "image side")->check(CLI::Range(16, 512))->capture_default_str();
    toy->add_option("--seed", toy_seed, "generator seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*attribute) return rsp::cmd_attribute(manifest_from(attr, true));
        if (*evaluate) {
            eopt.eval_mode = eval_mode == "P" ? rsp::EvalMode::predicted : rsp::EvalMode::labels;
            eopt.thresholded = threshold == "mean";
            return rsp::cmd_evaluate(manifest_from(ev, false), eopt, std::cout);
        }
        if (*sanity) return rsp::cmd_sanity(manifest_from(san, true), seed, std::cout);
        if (*toy) {
            rsp::toy::write_two_quadrant_suite(toy_out, toy_count, toy_seed, toy_size);
            std::cout << "wrote " << toy_count << " images to " << toy_out << "\n";
            return 0;
        }
    } catch (const rsp::InputError& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const rsp::AttributionError& e) {
        spdlog::error("{}", e.what());
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 2;
    }
    return 2;
}
