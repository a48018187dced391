#pragma once

#include <optional>
#include <string>
#include <vector>

#include "haan/checkpoint.hpp"
#include "haan/image.hpp"

namespace haan {

// The dB map: 10*log10(1/MSE); +infinity at zero. Exposed so exact-MSE cases
// can be checked without passing through float pixel storage.
double psnr_from_mse(double mse);

// 10*log10(1/MSE) over all components of unit-range images; +infinity when
// the images are identical.
double psnr(const ImageRGB& a, const ImageRGB& b);

// Luminance SSIM on the RGB-mean gray image: 11x11 Gaussian window with
// sigma 1.5, K1=0.01, K2=0.03, L=1, averaged over valid window positions.
double ssim(const ImageRGB& a, const ImageRGB& b);

struct EdgeRatioResult {
    double value = 1.0;
    bool empty_edge_set = false;
};

// Simplified visible-edge gradient ratio: Sobel magnitudes on gray, edges
// where the defogged gradient exceeds 0.1 x its max, mean of
// defogged/(foggy + 1e-6) over that set. Sentinel 1.0 when the set is empty.
EdgeRatioResult edge_gradient_ratio(const ImageRGB& foggy, const ImageRGB& defogged);

struct MetricsRecord {
    std::string name;
    std::optional<double> psnr_db;  // empty when infinite or no reference
    bool psnr_infinite = false;
    std::optional<double> ssim_value;
    double edge_ratio = 1.0;
    bool edge_set_empty = false;
    std::string error;  // non-empty -> the record failed and was skipped
};

struct MetricsReport {
    std::string checkpoint_id;
    std::string dataset_path;
    std::string timestamp;
    std::vector<MetricsRecord> records;
    double mean_psnr_db = 0.0;
    double mean_ssim = 0.0;
    double mean_edge_ratio = 0.0;
    std::size_t psnr_count = 0;
    std::size_t ssim_count = 0;
    std::size_t edge_count = 0;
};

// Runs defog inference on every PNG in foggy_dir (reference metrics when a
// same-stem file exists in ref_dir), aggregating arithmetic means over the
// finite per-record values. Unreadable inputs become error records.
MetricsReport evaluate(const std::string& foggy_dir, const std::string& ref_dir,
                       const Checkpoint& checkpoint, const std::string& checkpoint_id);

std::string report_to_json(const MetricsReport& report);
void write_report(const MetricsReport& report, const std::string& path);

}  // namespace haan
