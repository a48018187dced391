#include "haan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

#include "haan/networks.hpp"

namespace fs = std::filesystem;

namespace haan {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01, kK2 = 0.03, kL = 1.0;

void require_same_shape(const ImageRGB& a, const ImageRGB& b, const char* op) {
    if (a.height != b.height || a.width != b.width)
        throw DimensionError(std::string(op) + ": image shapes differ");
}

std::vector<double> gray_of(const ImageRGB& img) {
    std::vector<double> g(img.pixel_count());
    for (std::size_t p = 0; p < g.size(); ++p)
        g[p] = (double(img.pixels[p * 3]) + img.pixels[p * 3 + 1] + img.pixels[p * 3 + 2]) / 3.0;
    return g;
}

const std::vector<double>& gaussian_window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(kWindow * kWindow);
        const int r = kWindow / 2;
        double sum = 0.0;
        for (int y = 0; y < kWindow; ++y)
            for (int x = 0; x < kWindow; ++x) {
                const double dy = y - r, dx = x - r;
                v[y * kWindow + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
                sum += v[y * kWindow + x];
            }
        for (double& e : v) e /= sum;
        return v;
    }();
    return w;
}

// Sobel magnitude on interior pixels; border entries stay zero.
std::vector<double> sobel_magnitude(const std::vector<double>& g, int h, int w) {
    std::vector<double> mag(g.size(), 0.0);
    for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
            auto v = [&](int yy, int xx) { return g[std::size_t(yy) * w + xx]; };
            const double gx = (v(y - 1, x + 1) + 2 * v(y, x + 1) + v(y + 1, x + 1)) -
                              (v(y - 1, x - 1) + 2 * v(y, x - 1) + v(y + 1, x - 1));
            const double gy = (v(y + 1, x - 1) + 2 * v(y + 1, x) + v(y + 1, x + 1)) -
                              (v(y - 1, x - 1) + 2 * v(y - 1, x) + v(y - 1, x + 1));
            mag[std::size_t(y) * w + x] = std::sqrt(gx * gx + gy * gy);
        }
    }
    return mag;
}

int floor_to_multiple(int v, int m) { return std::max(m, (v / m) * m); }

// Metrics are computed on the bytes a save would produce.
ImageRGB quantize_unit(const ImageRGB& img) {
    ImageRGB out = img;
    for (float& v : out.pixels)
        v = std::floor(std::min(1.0f, std::max(0.0f, v)) * 255.0f + 0.5f) / 255.0f;
    return out;
}

}  // namespace

double psnr_from_mse(double mse) {
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double psnr(const ImageRGB& a, const ImageRGB& b) {
    require_same_shape(a, b, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = double(a.pixels[i]) - double(b.pixels[i]);
        mse += d * d;
    }
    return psnr_from_mse(mse / static_cast<double>(a.pixels.size()));
}

double ssim(const ImageRGB& a, const ImageRGB& b) {
    require_same_shape(a, b, "ssim");
    if (a.height < kWindow || a.width < kWindow)
        throw GeometryError("ssim: image smaller than the 11x11 window");

    const std::vector<double> ga = gray_of(a);
    const std::vector<double> gb = gray_of(b);
    const std::vector<double>& win = gaussian_window();
    const double c1 = (kK1 * kL) * (kK1 * kL);
    const double c2 = (kK2 * kL) * (kK2 * kL);

    const int h = a.height, w = a.width;
    double total = 0.0;
    std::size_t count = 0;
    for (int y = 0; y + kWindow <= h; ++y) {
        for (int x = 0; x + kWindow <= w; ++x) {
            double mu1 = 0.0, mu2 = 0.0;
            for (int wy = 0; wy < kWindow; ++wy)
                for (int wx = 0; wx < kWindow; ++wx) {
                    const double we = win[wy * kWindow + wx];
                    mu1 += we * ga[std::size_t(y + wy) * w + (x + wx)];
                    mu2 += we * gb[std::size_t(y + wy) * w + (x + wx)];
                }
            double s11 = 0.0, s22 = 0.0, s12 = 0.0;
            for (int wy = 0; wy < kWindow; ++wy)
                for (int wx = 0; wx < kWindow; ++wx) {
                    const double we = win[wy * kWindow + wx];
                    const double d1 = ga[std::size_t(y + wy) * w + (x + wx)] - mu1;
                    const double d2 = gb[std::size_t(y + wy) * w + (x + wx)] - mu2;
                    s11 += we * d1 * d1;
                    s22 += we * d2 * d2;
                    s12 += we * d1 * d2;
                }
            const double num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2);
            const double den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2);
            total += num / den;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

EdgeRatioResult edge_gradient_ratio(const ImageRGB& foggy, const ImageRGB& defogged) {
    require_same_shape(foggy, defogged, "edge_gradient_ratio");
    const std::vector<double> gf = sobel_magnitude(gray_of(foggy), foggy.height, foggy.width);
    const std::vector<double> gd = sobel_magnitude(gray_of(defogged), foggy.height, foggy.width);

    double max_grad = 0.0;
    for (double v : gd) max_grad = std::max(max_grad, v);
    const double threshold = 0.1 * max_grad;

    double sum = 0.0;
    std::size_t count = 0;
    if (max_grad > 0.0) {
        for (std::size_t i = 0; i < gd.size(); ++i) {
            if (gd[i] > threshold) {
                sum += gd[i] / (gf[i] + 1e-6);
                ++count;
            }
        }
    }
    if (count == 0) return {1.0, true};
    return {sum / static_cast<double>(count), false};
}

MetricsReport evaluate(const std::string& foggy_dir, const std::string& ref_dir,
                       const Checkpoint& checkpoint, const std::string& checkpoint_id) {
    MetricsReport report;
    report.checkpoint_id = checkpoint_id;
    report.dataset_path = foggy_dir;
    {
        std::time_t now = std::time(nullptr);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        report.timestamp = buf;
    }

    std::optional<ArchConfig> arch = read_arch(checkpoint);
    if (!arch) throw FormatError("checkpoint has no architecture metadata");
    Rng rng = Rng::derive(0, 1);
    DefogGenerator<float> defog = make_defog_generator<float>(*arch, rng);
    load_params(checkpoint, "m_r", defog.params);

    if (!fs::is_directory(foggy_dir)) throw IoError("not a directory: " + foggy_dir);
    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(foggy_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            inputs.push_back(entry.path());
    std::sort(inputs.begin(), inputs.end());

    double psnr_sum = 0.0, ssim_sum = 0.0, edge_sum = 0.0;
    for (const fs::path& path : inputs) {
        MetricsRecord rec;
        rec.name = path.filename().string();
        try {
            ImageRGB foggy = load_image(path.string());
            const int h = floor_to_multiple(foggy.height, 4);
            const int w = floor_to_multiple(foggy.width, 4);
            foggy = resize(foggy, h, w);

            Tensor<float> out = defog_forward(defog, image_to_tensor(to_signed(foggy)), Mode::kEval);
            ImageRGB defogged = quantize_unit(to_unit(tensor_to_image(out, Range::kSigned)));

            const EdgeRatioResult er = edge_gradient_ratio(foggy, defogged);
            rec.edge_ratio = er.value;
            rec.edge_set_empty = er.empty_edge_set;
            edge_sum += er.value;
            ++report.edge_count;

            if (!ref_dir.empty()) {
                const fs::path ref_path = fs::path(ref_dir) / path.filename();
                if (fs::exists(ref_path)) {
                    ImageRGB ref = resize(load_image(ref_path.string()), h, w);
                    const double p = psnr(defogged, ref);
                    if (std::isinf(p)) {
                        rec.psnr_infinite = true;
                    } else {
                        rec.psnr_db = p;
                        psnr_sum += p;
                        ++report.psnr_count;
                    }
                    rec.ssim_value = ssim(defogged, ref);
                    ssim_sum += *rec.ssim_value;
                    ++report.ssim_count;
                }
            }
        } catch (const Error& e) {
            rec.error = e.what();
        }
        report.records.push_back(std::move(rec));
    }

    if (report.psnr_count) report.mean_psnr_db = psnr_sum / report.psnr_count;
    if (report.ssim_count) report.mean_ssim = ssim_sum / report.ssim_count;
    if (report.edge_count) report.mean_edge_ratio = edge_sum / report.edge_count;
    return report;
}

std::string report_to_json(const MetricsReport& report) {
    nlohmann::json j;
    j["metadata"] = {{"checkpoint", report.checkpoint_id},
                     {"dataset", report.dataset_path},
                     {"timestamp", report.timestamp}};
    j["records"] = nlohmann::json::array();
    for (const auto& r : report.records) {
        nlohmann::json rec;
        rec["name"] = r.name;
        if (!r.error.empty()) {
            rec["error"] = r.error;
        } else {
            rec["psnr_db"] = r.psnr_db ? nlohmann::json(*r.psnr_db) : nlohmann::json(nullptr);
            rec["psnr_infinite"] = r.psnr_infinite;
            rec["ssim"] = r.ssim_value ? nlohmann::json(*r.ssim_value) : nlohmann::json(nullptr);
            rec["edge_gradient_ratio_simplified"] = r.edge_ratio;
            rec["edge_set_empty"] = r.edge_set_empty;
        }
        j["records"].push_back(rec);
    }
    j["aggregates"] = {{"mean_psnr_db", report.mean_psnr_db},
                       {"mean_ssim", report.mean_ssim},
                       {"mean_edge_gradient_ratio_simplified", report.mean_edge_ratio},
                       {"psnr_count", report.psnr_count},
                       {"ssim_count", report.ssim_count},
                       {"edge_count", report.edge_count}};
    return j.dump(2);
}

void write_report(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << report_to_json(report) << "\n";
}

}  // namespace haan
