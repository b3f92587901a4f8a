#include "oattn/commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "oattn/bench.hpp"
#include "oattn/dataset.hpp"
#include "oattn/errors.hpp"
#include "oattn/image_io.hpp"
#include "oattn/metrics.hpp"
#include "oattn/training.hpp"

namespace fs = std::filesystem;

namespace oattn {

namespace {

std::string precision_of(RunConfig& cfg) {
    std::string fallback = "f32";
    if (const char* env = std::getenv("ORACLE_ATTN_PRECISION")) fallback = env;
    const std::string p = cfg.get_string("precision", fallback);
    if (p != "f32" && p != "f64")
        throw ConfigError("precision must be f32 or f64, got '" + p + "'");
    return p;
}

std::string out_dir_of(RunConfig& cfg) {
    const std::string out = cfg.require_string("out.dir", "output directory");
    fs::create_directories(out);
    return out;
}

TrainConfig train_config_of(RunConfig& cfg) {
    TrainConfig tc;
    tc.preset = preset_from_string(cfg.get_string("model.preset", "res256"));
    tc.toy_side = static_cast<int>(cfg.get_int("model.toy_side", 64));
    tc.toy_width_scale = cfg.get_double("model.toy_width_scale", 0.25);
    const bool toy = tc.preset == Preset::Toy;
    tc.lr = cfg.get_double("train.lr", 1e-4);
    tc.batch = static_cast<int>(cfg.get_int("train.batch", toy ? 4 : 16));
    tc.n_critic = static_cast<int>(cfg.get_int("train.n_critic", 1));
    tc.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
    tc.max_steps = cfg.get_int("train.steps", 1000);
    tc.checkpoint_interval = cfg.get_int("train.checkpoint_interval", 100);
    tc.mask_mode = mask_mode_from_string(
        cfg.get_string("train.mask_mode", toy ? "center" : "random_rect"));
    tc.weights.lambda_r = cfg.get_double("loss.lambda_r", 10.0);
    tc.weights.lambda_kl = cfg.get_double("loss.lambda_kl", 2.0);
    tc.weights.lambda_p = cfg.get_double("loss.lambda_p", 1.0);
    tc.weights.lambda_g = cfg.get_double("loss.lambda_g", 1.0);
    tc.weights.gamma = cfg.get_double("loss.gamma", 10.0);
    const int comp = static_cast<int>(cfg.get_int("model.component_size", 0));
    if (comp > 0) tc.component_sizes = ComponentSizes::uniform(comp, comp);
    return tc;
}

// input (masked) | raw output | composite | ground truth, up to four rows
template <typename T>
Tensor<T> sample_grid(const Tensor<T>& input4, const Tensor<T>& out, const Tensor<T>& gt,
                      const std::vector<Mask>& masks) {
    const int n = std::min(4, out.shape[0]);
    const int side = out.shape[2];
    Tensor<T> grid({3, n * side, 4 * side});
    const std::int64_t hw = static_cast<std::int64_t>(side) * side;
    auto blit = [&](const T* src_plane, int row, int col, int c) {
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                grid.data[static_cast<std::size_t>(
                    (static_cast<std::int64_t>(c) * n * side + row * side + y) * 4 * side +
                    col * side + x)] = src_plane[y * side + x];
    };
    for (int i = 0; i < n; ++i) {
        Tensor<T> out_i({3, side, side});
        Tensor<T> gt_i({3, side, side});
        std::copy(out.data.begin() + static_cast<std::int64_t>(i) * 3 * hw,
                  out.data.begin() + static_cast<std::int64_t>(i + 1) * 3 * hw, out_i.data.begin());
        std::copy(gt.data.begin() + static_cast<std::int64_t>(i) * 3 * hw,
                  gt.data.begin() + static_cast<std::int64_t>(i + 1) * 3 * hw, gt_i.data.begin());
        const Tensor<T> comp = composite_valid(out_i, gt_i, masks[static_cast<std::size_t>(i)]);
        for (int c = 0; c < 3; ++c) {
            blit(input4.data.data() + (static_cast<std::int64_t>(i) * 4 + c) * hw, i, 0, c);
            blit(out_i.data.data() + static_cast<std::int64_t>(c) * hw, i, 1, c);
            blit(comp.data.data() + static_cast<std::int64_t>(c) * hw, i, 2, c);
            blit(gt_i.data.data() + static_cast<std::int64_t>(c) * hw, i, 3, c);
        }
    }
    return grid;
}

template <typename T>
Generator<T> generator_from_checkpoint(const CheckpointData& c) {
    GeneratorConfig gcfg;
    if (c.preset_tag == "res256") {
        gcfg = GeneratorConfig::res256();
    } else if (c.preset_tag == "res1024") {
        gcfg = GeneratorConfig::res1024();
    } else if (c.preset_tag == "toy") {
        gcfg = GeneratorConfig::toy(static_cast<int>(c.side), c.width_scale);
    } else {
        throw DataError("checkpoint carries unknown preset tag '" + c.preset_tag + "'");
    }
    Generator<T> gen = build_generator<T>(gcfg, 0);
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, tensor] : c.records) by_name.emplace(name, &tensor);
    auto copy_into = [&](const std::string& name, Tensor<T>& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint is missing record '" + name + "'");
        if (it->second->shape != dst.shape)
            throw DataError("checkpoint record '" + name + "' has shape " +
                            shape_str(it->second->shape) + ", expected " + shape_str(dst.shape));
        for (std::size_t i = 0; i < dst.data.size(); ++i)
            dst.data[i] = static_cast<T>(it->second->data[i]);
    };
    for (auto& p : gen.params) copy_into(p.name, p.value);
    for (auto& [name, tensor] : gen.state_tensors()) copy_into(name, *tensor);
    return gen;
}

template <typename T>
Tensor<T> infer_one(Generator<T>& gen, const Tensor<T>& input4, const MaskPyramid& pyr) {
    Tape<T> tape;
    std::vector<const MaskPyramid*> pyrs{&pyr};
    GenOutput<T> out = generator_forward(tape, gen, input4, pyrs, GenMode::Eval, false);
    Tensor<T> img({3, gen.cfg.side, gen.cfg.side});
    std::copy(out.out_val.data.begin(), out.out_val.data.end(), img.data.begin());
    return img;
}

// ---- train -------------------------------------------------------------------

template <typename T>
void cmd_train_impl(RunConfig& cfg) {
    const std::string out = out_dir_of(cfg);
    const TrainConfig tc = train_config_of(cfg);
    if (!cfg.has("data.landmarks"))
        throw ConfigError("landmarks required for component critics (set data.landmarks)");
    const std::string data_dir = cfg.require_string("data.dir", "training image directory");
    const std::string lm_path = cfg.get_string("data.landmarks", "");
    const std::string resume = cfg.get_string("train.resume", "");
    const std::string irregular_dir = cfg.get_string("train.irregular_masks", "");
    cfg.check_consumed();
    cfg.write_resolved((fs::path(out) / "run_config.json").string());

    std::vector<std::string> notices;
    std::map<std::string, LandmarkMap> landmarks;
    try {
        landmarks = read_landmark_file(lm_path);
    } catch (const DataError& e) {
        throw DataError(std::string("landmarks required for component critics: ") + e.what());
    }
    Dataset<T> ds = load_dataset<T>(data_dir, landmarks, tc.side(), true, &notices);
    for (const auto& note : notices) std::cerr << "note: " << note << "\n";

    std::vector<Mask> pool;
    const std::vector<Mask>* pool_ptr = nullptr;
    if (tc.mask_mode == MaskMode::Irregular) {
        if (irregular_dir.empty())
            throw ConfigError("train.irregular_masks directory is required for irregular mode");
        pool = load_mask_pool(irregular_dir, tc.side());
        pool_ptr = &pool;
    }

    Trainer<T> trainer(tc);
    if (!resume.empty()) trainer.restore(read_checkpoint_file(resume));

    const std::string csv_path = (fs::path(out) / "loss.csv").string();
    const bool csv_fresh = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
    std::ofstream csv(csv_path, resume.empty() ? std::ios::trunc : std::ios::app);
    if (!csv) throw DataError("cannot write " + csv_path);
    if (resume.empty() || csv_fresh)
        csv << "step,recon,kl,perceptual,gen_adv,gen_total,critic_total,hole_l1\n";

    auto save_ckpt = [&](std::uint64_t step, const Batch<T>* batch, const Tensor<T>* out_val) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint-%06llu.oatt",
                      static_cast<unsigned long long>(step));
        const CheckpointData c = trainer.make_checkpoint();
        write_checkpoint_file(c, (fs::path(out) / name).string());
        write_checkpoint_file(c, (fs::path(out) / "checkpoint-latest.oatt").string());
        if (batch && out_val) {
            const Tensor<T> input = masked_input(batch->images, batch->masks);
            std::snprintf(name, sizeof name, "samples-%06llu.png",
                          static_cast<unsigned long long>(step));
            save_image(sample_grid(input, *out_val, batch->images, batch->masks),
                       (fs::path(out) / name).string());
        }
    };

    while (trainer.step_count() < static_cast<std::uint64_t>(tc.max_steps)) {
        Batch<T> batch = draw_batch<T>(trainer.rng(), ds.images, ds.landmarks, tc.batch, tc.side(),
                                       tc.mask_mode, pool_ptr);
        const StepReport r = trainer.train_step(batch);
        if (r.aborted) {
            std::cerr << "step " << r.step << " aborted: " << r.abort_reason << "\n";
            continue;
        }
        csv << r.step << "," << r.recon << "," << r.kl << "," << r.perceptual << "," << r.gen_adv
            << "," << r.gen_total << "," << r.critic_total << "," << r.hole_l1 << "\n";
        if (r.kl_missing) std::cerr << "note: step " << r.step << ": " << r.kl_missing
                                    << " attention branch(es) inactive, KL term(s) contributed 0\n";
        if (r.step % 50 == 0 || r.step == 1)
            std::cout << "step " << r.step << "  total " << r.gen_total << "  hole_l1 " << r.hole_l1
                      << std::endl;
        if (r.step % static_cast<std::uint64_t>(tc.checkpoint_interval) == 0) {
            // regenerate the forward output for the grid from the updated model
            Tape<T> tape;
            std::vector<const MaskPyramid*> pyrs;
            std::vector<MaskPyramid> owned;
            for (const Mask& m : batch.masks) owned.push_back(build_pyramid(m, trainer.generator().cfg.dsa_sides()));
            for (const auto& p : owned) pyrs.push_back(&p);
            GenOutput<T> g = generator_forward(tape, trainer.generator(),
                                               masked_input(batch.images, batch.masks), pyrs,
                                               GenMode::Eval, false);
            save_ckpt(r.step, &batch, &g.out_val);
        }
    }
    if (trainer.step_count() % static_cast<std::uint64_t>(tc.checkpoint_interval) != 0)
        save_ckpt(trainer.step_count(), nullptr, nullptr);
    csv.flush();
    std::cout << "training done at step " << trainer.step_count() << "; artifacts in " << out
              << std::endl;
}

// ---- infer --------------------------------------------------------------------

template <typename T>
void cmd_infer_impl(RunConfig& cfg) {
    const std::string out = out_dir_of(cfg);
    const std::string ckpt_path = cfg.require_string("infer.checkpoint", "checkpoint file");
    const std::string inputs = cfg.require_string("infer.inputs", "input image directory");
    const MaskMode mode = mask_mode_from_string(cfg.get_string("infer.mask_mode", "center"));
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("infer.seed", 0));
    const std::string mask_dir = cfg.get_string("infer.masks", "");
    cfg.check_consumed();
    cfg.write_resolved((fs::path(out) / "run_config.json").string());

    Generator<T> gen = generator_from_checkpoint<T>(read_checkpoint_file(ckpt_path));
    const int side = gen.cfg.side;
    const auto names = list_pngs_sorted(inputs);
    if (names.empty()) throw DataError("no input images in " + inputs);

    int ok = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        try {
            std::vector<std::string> notices;
            const Tensor<T> gt = load_image<T>((fs::path(inputs) / names[i]).string(), side, &notices);
            for (const auto& n : notices) std::cerr << "note: " << n << "\n";
            Mask mask;
            if (mode == MaskMode::Irregular) {
                if (mask_dir.empty())
                    throw DataError("irregular mode needs infer.masks with per-image mask files");
                mask = load_mask_png((fs::path(mask_dir) / names[i]).string(), side);
            } else {
                Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
                mask = gen_hole_mask(rng, side, mode);
            }
            Tensor<T> batch1({1, 3, side, side});
            std::copy(gt.data.begin(), gt.data.end(), batch1.data.begin());
            const Tensor<T> input = masked_input(batch1, {mask});
            MaskPyramid pyr = build_pyramid(mask, gen.cfg.dsa_sides());
            const Tensor<T> raw = infer_one(gen, input, pyr);
            const Tensor<T> comp = composite_valid(raw, gt, mask);
            const std::string stem = fs::path(names[i]).stem().string();
            save_image(raw, (fs::path(out) / (stem + "-output.png")).string());
            save_image(comp, (fs::path(out) / (stem + "-composite.png")).string());
            ++ok;
        } catch (const DataError& e) {
            std::cerr << "error: '" << names[i] << "': " << e.what() << "\n";
        }
    }
    if (ok == 0) throw DataError("no image could be processed");
    std::cout << "wrote " << 2 * ok << " files to " << out << std::endl;
}

// ---- eval ---------------------------------------------------------------------

template <typename T>
void cmd_eval_impl(RunConfig& cfg) {
    const std::string out = out_dir_of(cfg);
    const std::string ckpt_path = cfg.require_string("eval.checkpoint", "checkpoint file");
    const std::string data_dir = cfg.require_string("data.dir", "evaluation image directory");
    const std::string lm_path = cfg.require_string("data.landmarks", "landmark file");
    const MaskMode mode = mask_mode_from_string(cfg.get_string("eval.mask_mode", "random_rect"));
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("eval.seed", 0));
    const std::string mask_dir = cfg.get_string("eval.masks", "");
    cfg.check_consumed();
    cfg.write_resolved((fs::path(out) / "run_config.json").string());

    Generator<T> gen = generator_from_checkpoint<T>(read_checkpoint_file(ckpt_path));
    const auto landmarks = read_landmark_file(lm_path);
    std::vector<std::string> notices;
    Dataset<T> ds = load_dataset<T>(data_dir, landmarks, gen.cfg.side, false, &notices);

    std::vector<Mask> pool;
    const std::vector<Mask>* pool_ptr = nullptr;
    if (mode == MaskMode::Irregular) {
        if (mask_dir.empty()) throw ConfigError("eval.masks directory is required for irregular mode");
        pool = load_mask_pool(mask_dir, gen.cfg.side);
        pool_ptr = &pool;
    }

    InferFn<T> infer = [&](const Tensor<T>& input4, const MaskPyramid& pyr) {
        return infer_one(gen, input4, pyr);
    };
    EvalReport report = evaluate_set<T>(infer, ds.images, ds.names, landmarks, mode, seed,
                                        gen.cfg.dsa_sides(), pool_ptr, &notices);
    for (const auto& n : notices) std::cerr << "note: " << n << "\n";
    if (report.rows.empty()) throw DataError("evaluation set is empty (no image had landmarks)");

    std::ofstream jf((fs::path(out) / "report.json").string(), std::ios::trunc);
    jf << report.to_json();
    std::ofstream tf((fs::path(out) / "report.txt").string(), std::ios::trunc);
    tf << report.to_text();
    std::cout << report.to_text();
}

}  // namespace

// ---- dispatch -------------------------------------------------------------------

void cmd_train(RunConfig& cfg) {
    if (precision_of(cfg) == "f64")
        cmd_train_impl<double>(cfg);
    else
        cmd_train_impl<float>(cfg);
}

void cmd_infer(RunConfig& cfg) {
    if (precision_of(cfg) == "f64")
        cmd_infer_impl<double>(cfg);
    else
        cmd_infer_impl<float>(cfg);
}

void cmd_eval(RunConfig& cfg) {
    if (precision_of(cfg) == "f64")
        cmd_eval_impl<double>(cfg);
    else
        cmd_eval_impl<float>(cfg);
}

void cmd_bench_dsa(RunConfig& cfg) {
    (void)precision_of(cfg);  // the kernels run in f32; consume the key for the record
    const int side = static_cast<int>(cfg.get_int("bench.side", 64));
    const int channels = static_cast<int>(cfg.get_int("bench.channels", 128));
    const int iters = static_cast<int>(cfg.get_int("bench.iterations", 100));
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("bench.seed", 0));
    const std::string out = cfg.get_string("out.dir", "");
    cfg.check_consumed();
    if (iters < 100) throw ConfigError("bench.iterations must be at least 100 warm iterations");

    const BenchResult res = bench_dsa(side, channels, iters, seed);
    if (!res.correctness_ok)
        throw TapeError("benchmark correctness gate failed: reconstructions left the context hull");
    std::cout << res.to_text();
    if (!out.empty()) {
        fs::create_directories(out);
        cfg.write_resolved((fs::path(out) / "run_config.json").string());
        std::ofstream f((fs::path(out) / "bench.json").string(), std::ios::trunc);
        f << res.to_json();
    }
}

int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace oattn
