#include "dse/array_store.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "dse/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dse {

namespace {

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat: return "float32";
        case torch::kDouble: return "float64";
        default: throw ContractViolation("array store: unsupported dtype " + std::string(c10::toString(t)));
    }
}

torch::ScalarType dtype_from(const std::string& name, const fs::path& where) {
    if (name == "float32") return torch::kFloat;
    if (name == "float64") return torch::kDouble;
    throw IoError("unsupported dtype '" + name + "' in " + where.string());
}

std::string temp_suffix() {
    std::random_device rd;
    std::ostringstream os;
    os << ".tmp-" << std::hex << rd() << rd();
    return os.str();
}

}  // namespace

const torch::Tensor* ArrayBundle::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
    const fs::path tmp = path.string() + temp_suffix();
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

void write_bundle(const fs::path& dir, const ArrayBundle& bundle) {
    std::error_code ec;
    const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create " + parent.string() + ": " + ec.message());

    const fs::path tmp = dir.string() + temp_suffix();
    fs::create_directories(tmp, ec);
    if (ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());

    json arrays = json::array();
    for (const auto& [name, tensor] : bundle.arrays) {
        const auto t = tensor.detach().to(torch::kCPU).contiguous();
        const std::string file = name + ".bin";
        std::ofstream out(tmp / file, std::ios::binary);
        if (!out) throw IoError("cannot write " + (tmp / file).string());
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
        if (!out) throw IoError("short write to " + (tmp / file).string());
        arrays.push_back({{"name", name},
                          {"shape", t.sizes().vec()},
                          {"dtype", dtype_name(t.scalar_type())},
                          {"file", file}});
    }
    json manifest = {{"format", kArrayFormat}, {"kind", bundle.kind}, {"meta", bundle.meta},
                     {"arrays", arrays}};
    {
        std::ofstream out(tmp / "manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out) throw IoError("cannot write manifest in " + tmp.string());
    }

    // Swap into place; an existing bundle is moved aside first so a reader never
    // observes a half-written directory.
    fs::path old;
    if (fs::exists(dir)) {
        old = dir.string() + temp_suffix();
        fs::rename(dir, old, ec);
        if (ec) throw IoError("cannot replace " + dir.string() + ": " + ec.message());
    }
    fs::rename(tmp, dir, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + dir.string() + ": " + ec.message());
    if (!old.empty()) fs::remove_all(old);
}

ArrayBundle read_bundle(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw IoError("missing manifest: " + manifest_path.string());
    json manifest;
    try {
        std::ifstream in(manifest_path);
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kArrayFormat)
        throw IoError("unrecognized format in " + manifest_path.string() + " (expected " + kArrayFormat + ")");

    ArrayBundle bundle;
    try {
        bundle.kind = manifest.at("kind").get<std::string>();
        bundle.meta = manifest.value("meta", json::object());
        for (const auto& entry : manifest.at("arrays")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<int64_t>>();
            const auto dtype = dtype_from(entry.at("dtype").get<std::string>(), manifest_path);
            const fs::path file = dir / entry.at("file").get<std::string>();
            auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
            std::ifstream in(file, std::ios::binary);
            if (!in) throw IoError("missing array file " + file.string());
            in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
            if (in.gcount() != static_cast<std::streamsize>(t.nbytes()))
                throw IoError("truncated array file " + file.string());
            bundle.arrays.emplace_back(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    return bundle;
}

ArrayBundle module_bundle(const torch::nn::Module& module, std::string kind, json meta) {
    ArrayBundle bundle;
    bundle.kind = std::move(kind);
    bundle.meta = std::move(meta);
    for (const auto& p : module.named_parameters(true)) bundle.arrays.emplace_back(p.key(), p.value());
    for (const auto& b : module.named_buffers(true)) bundle.arrays.emplace_back(b.key(), b.value());
    return bundle;
}

void load_module_state(torch::nn::Module& module, const ArrayBundle& bundle, const std::string& source) {
    torch::NoGradGuard no_grad;
    auto assign = [&](const std::string& name, torch::Tensor& dst) {
        const torch::Tensor* src = bundle.find(name);
        if (!src) throw IoError(source + ": missing array '" + name + "'");
        if (src->sizes() != dst.sizes()) {
            std::ostringstream os;
            os << source << ": array '" << name << "' has shape " << src->sizes() << ", expected "
               << dst.sizes();
            throw IoError(os.str());
        }
        dst.copy_(*src);
    };
    for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const torch::Tensor& tensor) {
        const auto t = tensor.detach().to(torch::kCPU).contiguous();
        const auto* bytes = static_cast<const unsigned char*>(t.data_ptr());
        for (size_t i = 0; i < t.nbytes(); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : module.parameters(true)) mix(p);
    for (const auto& b : module.buffers(true)) mix(b);
    return h;
}

}  // namespace dse
