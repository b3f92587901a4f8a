#include "oattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace oattn {

namespace {

template <typename T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw TapeError("metric: image shapes differ, " + shape_str(a.shape) + " vs " +
                        shape_str(b.shape));
    if (a.shape.size() != 3) throw TapeError("metric: expects [C,H,W], got " + shape_str(a.shape));
}

}  // namespace

template <typename T>
double l1_percent(const Tensor<T>& a, const Tensor<T>& b) {
    check_pair(a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        acc += std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    return 100.0 * acc / static_cast<double>(a.data.size());
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
    check_pair(a, b);
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

// channel-mean luminance as doubles
template <typename T>
std::vector<double> luminance(const Tensor<T>& img) {
    const int c = img.shape[0];
    const std::int64_t hw = static_cast<std::int64_t>(img.shape[1]) * img.shape[2];
    std::vector<double> out(static_cast<std::size_t>(hw), 0.0);
    for (int ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < hw; ++i)
            out[static_cast<std::size_t>(i)] += static_cast<double>(img.data[static_cast<std::size_t>(ch * hw + i)]);
    for (auto& v : out) v /= c;
    return out;
}

std::vector<double> gaussian_window11() {
    std::vector<double> w(11);
    const double sigma = 1.5;
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
        const double d = i - 5.0;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

}  // namespace

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    check_pair(a, b);
    const int h = a.shape[1], w = a.shape[2];
    constexpr int kWin = 11;
    if (h < kWin || w < kWin)
        throw TapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " smaller than the 11x11 window");
    const auto lx = luminance(a);
    const auto ly = luminance(b);
    const auto win = gaussian_window11();
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;

    double acc = 0.0;
    std::int64_t count = 0;
    for (int top = 0; top + kWin <= h; ++top) {
        for (int left = 0; left + kWin <= w; ++left) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int r = 0; r < kWin; ++r) {
                const double wr = win[static_cast<std::size_t>(r)];
                const double* px = lx.data() + static_cast<std::int64_t>(top + r) * w + left;
                const double* py = ly.data() + static_cast<std::int64_t>(top + r) * w + left;
                for (int c = 0; c < kWin; ++c) {
                    const double wc = wr * win[static_cast<std::size_t>(c)];
                    mx += wc * px[c];
                    my += wc * py[c];
                    xx += wc * px[c] * px[c];
                    yy += wc * py[c] * py[c];
                    xy += wc * px[c] * py[c];
                }
            }
            const double vx = xx - mx * mx;
            const double vy = yy - my * my;
            const double cxy = xy - mx * my;
            acc += ((2 * mx * my + c1) * (2 * cxy + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %10s %10s %8s\n", "image", "L1%", "PSNR(dB)", "SSIM");
    os << line;
    auto fmt = [&](const std::string& name, double l1, double ps, double ss) {
        if (std::isinf(ps))
            std::snprintf(line, sizeof line, "%-28s %10.4f %10s %8.4f\n", name.c_str(), l1, "inf", ss);
        else
            std::snprintf(line, sizeof line, "%-28s %10.4f %10.4f %8.4f\n", name.c_str(), l1, ps, ss);
        os << line;
    };
    for (const auto& r : rows) fmt(r.name, r.l1_percent, r.psnr, r.ssim);
    fmt("aggregate(" + std::to_string(rows.size()) + ")", l1_percent, psnr, ssim);
    for (const auto& s : skipped) os << "skipped (no landmarks): " << s << "\n";
    return os.str();
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["mask_mode"] = mask_mode;
    j["seed"] = seed;
    j["image_count"] = rows.size();
    auto num = [](double v) {
        return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    };
    j["aggregate"] = {{"l1_percent", num(l1_percent)},
                      {"psnr", num(psnr)},
                      {"ssim", num(ssim)},
                      {"lpips", nullptr}};
    j["images"] = nlohmann::json::array();
    for (const auto& r : rows)
        j["images"].push_back({{"name", r.name},
                               {"l1_percent", num(r.l1_percent)},
                               {"psnr", num(r.psnr)},
                               {"ssim", num(r.ssim)},
                               {"lpips", nullptr}});
    j["skipped"] = skipped;
    return j.dump(2) + "\n";
}

template <typename T>
EvalReport evaluate_set(const InferFn<T>& infer, const std::vector<Tensor<T>>& images,
                        const std::vector<std::string>& names,
                        const std::map<std::string, LandmarkMap>& landmarks, MaskMode mode,
                        std::uint64_t seed, const std::vector<int>& pyramid_sides,
                        const std::vector<Mask>* irregular_pool, std::vector<std::string>* notices) {
    if (images.size() != names.size())
        throw TapeError("evaluate_set: image and name counts differ");
    EvalReport report;
    report.mask_mode = mask_mode_name(mode);
    report.seed = seed;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!landmarks.count(names[i])) {
            report.skipped.push_back(names[i]);
            if (notices)
                notices->push_back("skipping '" + names[i] + "': no landmarks in the landmark file");
            continue;
        }
        const Tensor<T>& gt = images[i];
        const int side = gt.shape[1];
        Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
        Mask mask;
        if (mode == MaskMode::Irregular) {
            if (!irregular_pool || irregular_pool->empty())
                throw TapeError("evaluate_set: irregular mode needs a mask pool");
            mask = (*irregular_pool)[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(irregular_pool->size()) - 1))];
        } else {
            mask = gen_hole_mask(rng, side, mode);
        }
        Tensor<T> batch1({1, 3, side, side});
        std::copy(gt.data.begin(), gt.data.end(), batch1.data.begin());
        const Tensor<T> input = masked_input(batch1, {mask});
        MaskPyramid pyr = build_pyramid(mask, pyramid_sides);
        Tensor<T> raw = infer(input, pyr);
        Tensor<T> composited = composite_valid(raw, gt, mask);
        EvalRow row;
        row.name = names[i];
        row.l1_percent = l1_percent(composited, gt);
        row.psnr = psnr(composited, gt);
        row.ssim = ssim(composited, gt);
        report.rows.push_back(row);
    }
    for (const auto& r : report.rows) {
        report.l1_percent += r.l1_percent;
        report.psnr += r.psnr;
        report.ssim += r.ssim;
    }
    if (!report.rows.empty()) {
        const double n = static_cast<double>(report.rows.size());
        report.l1_percent /= n;
        report.psnr /= n;
        report.ssim /= n;
    }
    return report;
}

#define OATTN_INSTANTIATE(T)                                                                     \
    template double l1_percent<T>(const Tensor<T>&, const Tensor<T>&);                           \
    template double psnr<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template double ssim<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template EvalReport evaluate_set<T>(const InferFn<T>&, const std::vector<Tensor<T>>&,        \
                                        const std::vector<std::string>&,                         \
                                        const std::map<std::string, LandmarkMap>&, MaskMode,     \
                                        std::uint64_t, const std::vector<int>&,                  \
                                        const std::vector<Mask>*, std::vector<std::string>*);

OATTN_INSTANTIATE(float)
OATTN_INSTANTIATE(double)
#undef OATTN_INSTANTIATE

}  // namespace oattn
