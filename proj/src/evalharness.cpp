#include "dse/evalharness.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"
#include "dse/image_io.hpp"
#include "dse/similarity.hpp"

using nlohmann::json;

namespace dse {

namespace {

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
    if (a.sizes() != b.sizes()) {
        std::ostringstream os;
        os << op << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
        throw ContractViolation(os.str());
    }
}

double psnr_from_mse(double mse, double range) {
    if (mse == 0.0) return kPsnrIdentical;
    return 10.0 * std::log10(range * range / mse);
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b, double dynamic_range) {
    require_same(a, b, "psnr");
    const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
    return psnr_from_mse(mse, dynamic_range);
}

std::vector<double> psnr_per_sample(const torch::Tensor& a, const torch::Tensor& b, double dynamic_range) {
    require_same(a, b, "psnr");
    const auto mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).flatten(1).mean(1);
    std::vector<double> out;
    for (int64_t i = 0; i < mse.size(0); ++i) out.push_back(psnr_from_mse(mse[i].item<double>(), dynamic_range));
    return out;
}

std::vector<MetricRow> compare_images(const torch::Tensor& a, const torch::Tensor& b, Backbone& backbone,
                                      const std::vector<std::string>& ids) {
    require_same(a, b, "compare_images");
    if (a.dim() != 4 || a.size(1) != 3) throw ContractViolation("compare_images expects (n, 3, H, W) batches");
    if (!ids.empty() && static_cast<int64_t>(ids.size()) != a.size(0))
        throw ContractViolation("compare_images: one id per image required");
    torch::NoGradGuard no_grad;
    const auto a01 = (a.detach().to(torch::kDouble) + 1.0) / 2.0;
    const auto b01 = (b.detach().to(torch::kDouble) + 1.0) / 2.0;
    const auto p = psnr_per_sample(a01, b01, 1.0);
    const auto s = ssim_per_sample(a01, b01, 11, 1.0);
    const auto m = (a01 - b01).pow(2).flatten(1).mean(1);
    const auto dtype = backbone->parameters().front().scalar_type();
    const auto l = lpips_per_sample(a.detach().to(dtype), b.detach().to(dtype), backbone).to(torch::kDouble);
    const auto fa = a01.flatten(1), fb = b01.flatten(1);
    const auto na = fa.norm(2, 1), nb = fb.norm(2, 1);
    const auto cs = torch::where((na * nb) > 0, (fa * fb).sum(1) / (na * nb).clamp_min(1e-300),
                                 torch::where(na + nb > 0, torch::zeros_like(na), torch::ones_like(na)));
    std::vector<MetricRow> rows;
    for (int64_t i = 0; i < a.size(0); ++i) {
        MetricRow r;
        r.id = ids.empty() ? std::to_string(i) : ids[i];
        r.psnr = p[i];
        r.ssim = s[i].item<double>();
        r.mse_e2 = m[i].item<double>() * 100.0;
        r.lpips = l[i].item<double>();
        r.cs = cs[i].item<double>();
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Report

MetricRow MetricReport::average(const std::vector<MetricRow>& rows) {
    MetricRow m;
    m.id = "mean";
    if (rows.empty()) return m;
    for (const auto& r : rows) {
        m.psnr += r.psnr;
        m.ssim += r.ssim;
        m.mse_e2 += r.mse_e2;
        m.lpips += r.lpips;
        m.cs += r.cs;
    }
    const double n = static_cast<double>(rows.size());
    m.psnr /= n;
    m.ssim /= n;
    m.mse_e2 /= n;
    m.lpips /= n;
    m.cs /= n;
    return m;
}

std::string MetricReport::csv() const {
    std::ostringstream os;
    os << "id,PSNR,SSIM,MSE_e2,LPIPS,CS\n";
    for (const auto& r : rows)
        os << r.id << ',' << fmt(r.psnr) << ',' << fmt(r.ssim) << ',' << fmt(r.mse_e2) << ',' << fmt(r.lpips) << ','
           << fmt(r.cs) << '\n';
    return os.str();
}

std::string MetricReport::table() const {
    std::ostringstream os;
    auto line = [&](const MetricRow& r) {
        os << std::left << std::setw(16) << r.id << std::right << std::fixed << std::setprecision(4) << std::setw(10)
           << r.psnr << std::setw(10) << r.ssim << std::setw(10) << r.mse_e2 << std::setw(10) << r.lpips
           << std::setw(10) << r.cs << '\n';
    };
    os << std::left << std::setw(16) << "id" << std::right << std::setw(10) << "PSNR" << std::setw(10) << "SSIM"
       << std::setw(10) << "MSE(e2)" << std::setw(10) << "LPIPS" << std::setw(10) << "CS" << '\n';
    for (const auto& r : rows) line(r);
    line(mean);
    os << kCsDefinition << '\n';
    return os.str();
}

void MetricReport::write_csv(const std::filesystem::path& path) const { write_file_atomic(path, csv()); }

ImageSource ImageSource::from_path(const std::filesystem::path& path) {
    ImageSource src;
    if (std::filesystem::is_directory(path)) {
        src.entries = list_images(path);
        return src;
    }
    std::ifstream in(path);
    if (!in) throw IoError("image source not found: " + path.string());
    const auto base = path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path f(p);
        return f.is_absolute() ? f : base / f;
    };
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (line[0] == '{') {
            try {
                const auto j = json::parse(line);
                src.entries.emplace_back(j.at("id").get<std::string>(), resolve(j.at("image").get<std::string>()));
            } catch (const json::exception& e) {
                throw IoError("bad manifest line in " + path.string() + ": " + e.what());
            }
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            const auto f = resolve(line);
            src.entries.emplace_back(f.stem().string(), f);
        } else {
            src.entries.emplace_back(line.substr(0, comma), resolve(line.substr(comma + 1)));
        }
    }
    std::sort(src.entries.begin(), src.entries.end());
    return src;
}

MetricReport evaluate_pairs(const ImageSource& a, const ImageSource& b, Backbone& backbone,
                            std::optional<int64_t> resolution) {
    std::map<std::string, std::filesystem::path> left(a.entries.begin(), a.entries.end());
    std::map<std::string, std::filesystem::path> right(b.entries.begin(), b.entries.end());
    std::vector<std::string> only_a, only_b;
    for (const auto& [id, p] : left)
        if (!right.count(id)) only_a.push_back(id);
    for (const auto& [id, p] : right)
        if (!left.count(id)) only_b.push_back(id);
    if (!only_a.empty() || !only_b.empty()) {
        std::ostringstream os;
        os << "image sets are not aligned by id; unmatched ids:";
        for (const auto& id : only_a) os << " A:" << id;
        for (const auto& id : only_b) os << " B:" << id;
        throw ContractViolation(os.str());
    }

    MetricReport report;
    for (const auto& [id, pa] : left) {
        auto ia = load_image(pa);
        auto ib = load_image(right.at(id));
        if (resolution) {
            ia = preprocess(ia, *resolution);
            ib = preprocess(ib, *resolution);
        }
        if (ia.sizes() != ib.sizes()) throw ContractViolation("image '" + id + "' differs in size between the two sets");
        auto rows = compare_images(ia.unsqueeze(0), ib.unsqueeze(0), backbone, {id});
        report.rows.push_back(rows.front());
    }
    report.mean = MetricReport::average(report.rows);
    report.config = {{"pairs", report.rows.size()},
                     {"cs_definition", kCsDefinition},
                     {"backbone", backbone->spec().to_json()},
                     {"resolution", resolution ? json(*resolution) : json(nullptr)}};
    return report;
}

// ---------------------------------------------------------------------------
// Grid

void emit_grid(const std::vector<torch::Tensor>& images, const GridLayout& layout, const std::filesystem::path& path) {
    if (images.empty()) throw ContractViolation("emit_grid: no images");
    if (layout.rows <= 0 || layout.cols <= 0 || layout.rows * layout.cols < static_cast<int64_t>(images.size()))
        throw ContractViolation("emit_grid: layout " + std::to_string(layout.rows) + "x" + std::to_string(layout.cols) +
                                " cannot hold " + std::to_string(images.size()) + " images");
    if (!layout.captions.empty() && layout.captions.size() != images.size())
        throw ContractViolation("emit_grid: one caption per image required");
    const auto shape = images.front().sizes().vec();
    for (const auto& im : images) {
        if (im.dim() != 3 || im.size(0) != 3) throw ContractViolation("emit_grid: images must be (3, H, W)");
        if (im.sizes().vec() != shape) throw ContractViolation("emit_grid: images differ in size");
    }
    const int h = static_cast<int>(shape[1]), w = static_cast<int>(shape[2]);
    const int pad = static_cast<int>(layout.padding);
    const int caption = layout.captions.empty() ? 0 : 14;
    const int cell_h = h + caption + pad, cell_w = w + pad;
    cv::Mat canvas(static_cast<int>(layout.rows) * cell_h + pad, static_cast<int>(layout.cols) * cell_w + pad, CV_8UC3,
                   cv::Scalar(255, 255, 255));
    for (size_t i = 0; i < images.size(); ++i) {
        const int r = static_cast<int>(i / layout.cols), c = static_cast<int>(i % layout.cols);
        auto bytes = images[i].detach().to(torch::kFloat).clamp(-1.0, 1.0).add(1.0).mul(127.5).round()
                         .to(torch::kUInt8).permute({1, 2, 0}).contiguous();
        cv::Mat rgb(h, w, CV_8UC3, bytes.data_ptr<uint8_t>());
        cv::Mat bgr;
        cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
        const int top = pad + r * cell_h, left = pad + c * cell_w;
        bgr.copyTo(canvas(cv::Rect(left, top, w, h)));
        if (caption)
            cv::putText(canvas, layout.captions[i], cv::Point(left, top + h + caption - 3), cv::FONT_HERSHEY_SIMPLEX,
                        0.35, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
    }
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), canvas);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) throw IoError("cannot write grid image " + path.string());
}

}  // namespace dse
