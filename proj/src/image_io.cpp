#include "dse/image_io.hpp"

#include <algorithm>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dse/errors.hpp"

namespace F = torch::nn::functional;

namespace dse {

torch::Tensor load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("image not found: " + path.string());
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot decode image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat).div(127.5).sub(1.0).contiguous();
}

void save_image(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3) {
        std::ostringstream os;
        os << "save_image expects (3, H, W), got " << image.sizes();
        throw ContractViolation(os.str());
    }
    auto bytes = image.detach().to(torch::kFloat).clamp(-1.0, 1.0).add(1.0).mul(127.5).round()
                     .to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3, bytes.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), bgr);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) throw IoError("cannot write image " + path.string());
}

torch::Tensor preprocess(const torch::Tensor& image, int64_t size) {
    if (image.dim() != 3 || image.size(0) != 3) throw ContractViolation("preprocess expects a (3, H, W) image");
    if (size <= 0) throw ContractViolation("preprocess target size must be positive");
    const int64_t h = image.size(1), w = image.size(2);
    const int64_t side = std::min(h, w);
    auto square = image.narrow(1, (h - side) / 2, side).narrow(2, (w - side) / 2, side);
    if (side == size) return square.contiguous();
    return F::interpolate(square.unsqueeze(0), F::InterpolateFuncOptions()
                                                   .size(std::vector<int64_t>{size, size})
                                                   .mode(torch::kBilinear)
                                                   .align_corners(false))
        .squeeze(0);
}

torch::Tensor load_batch(const std::vector<std::filesystem::path>& files, int64_t size) {
    std::vector<torch::Tensor> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(preprocess(load_image(f), size));
    if (out.empty()) return torch::empty({0, 3, size, size});
    return torch::stack(out);
}

std::vector<std::pair<std::string, std::filesystem::path>> list_images(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<std::pair<std::string, std::filesystem::path>> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.emplace_back(entry.path().stem().string(), entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace dse
