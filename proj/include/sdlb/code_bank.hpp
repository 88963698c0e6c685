#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlb/checkpoint.hpp"
#include "sdlb/rng.hpp"
#include "sdlb/tensor.hpp"
#include "sdlb/world.hpp"

namespace sdlb {

// Bank of canonical style codes plus the standardization stats diffusion
// operates in. File format "SDCB": magic, version u32, N/K/D u64, mean and
// std arrays, codes as little-endian f64, then a parallel label section
// (bit mask u64 + class u64 per sample) and a provenance trailer.
struct CodeBank {
    Tensor codes;  // [N, K, D]
    std::vector<AttributeLabel> labels;
    Tensor mean;    // [K, D]
    Tensor stddev;  // [K, D]
    std::uint64_t world_seed = 0;
    std::uint64_t bits = 0;
    std::uint64_t expr_classes = 0;
    std::uint64_t world_version = kWorldVersion;

    std::size_t size() const { return codes.rank() == 3 ? codes.shape[0] : 0; }

    Tensor code(std::size_t i) const {
        const std::size_t kd = codes.shape[1] * codes.shape[2];
        Tensor out({codes.shape[1], codes.shape[2]});
        std::copy(codes.data.begin() + i * kd, codes.data.begin() + (i + 1) * kd, out.data.begin());
        return out;
    }

    Tensor standardize(const Tensor& code) const {
        Tensor out(code.shape);
        for (std::size_t i = 0; i < code.size(); ++i) {
            out.data[i] = (code.data[i] - mean.data[i]) / stddev.data[i];
        }
        return out;
    }

    Tensor destandardize(const Tensor& code) const {
        Tensor out(code.shape);
        for (std::size_t i = 0; i < code.size(); ++i) {
            out.data[i] = code.data[i] * stddev.data[i] + mean.data[i];
        }
        return out;
    }
};

inline constexpr std::uint32_t kCodeBankVersion = 1;

inline CodeBank build_code_bank(const SynthWorld& world, std::size_t n, Rng& rng) {
    if (n < 2) throw std::invalid_argument("build_code_bank: n must be >= 2");
    const auto& cfg = world.config();
    const std::size_t K = cfg.tokens, D = cfg.code_dim, kd = K * D;
    CodeBank bank;
    bank.codes = Tensor({n, K, D});
    bank.labels.reserve(n);
    bank.world_seed = cfg.seed;
    bank.bits = cfg.bits;
    bank.expr_classes = cfg.expr_classes;
    for (std::size_t i = 0; i < n; ++i) {
        AttributeLabel attrs = world.random_attrs(rng);
        Tensor z = Tensor::randn({cfg.z_dim}, rng);
        Tensor code = world.sample_canonical_code(z, attrs, rng);
        std::copy(code.data.begin(), code.data.end(), bank.codes.data.begin() + i * kd);
        bank.labels.push_back(std::move(attrs));
    }
    bank.mean = Tensor({K, D});
    bank.stddev = Tensor({K, D});
    for (std::size_t j = 0; j < kd; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += bank.codes.data[i * kd + j];
        const double mu = s / static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = bank.codes.data[i * kd + j] - mu;
            v += d * d;
        }
        bank.mean.data[j] = mu;
        bank.stddev.data[j] = std::max(std::sqrt(v / static_cast<double>(n)), 1e-12);
    }
    return bank;
}

inline void save_code_bank(const std::string& path, const CodeBank& bank) {
    std::string out;
    out += "SDCB";
    io::put_u32(out, kCodeBankVersion);
    const std::size_t n = bank.size(), K = bank.codes.shape[1], D = bank.codes.shape[2];
    io::put_u64(out, n);
    io::put_u64(out, K);
    io::put_u64(out, D);
    for (double d : bank.mean.data) io::put_f64(out, d);
    for (double d : bank.stddev.data) io::put_f64(out, d);
    for (double d : bank.codes.data) io::put_f64(out, d);
    for (const AttributeLabel& l : bank.labels) {
        std::uint64_t mask = 0;
        for (std::size_t b = 0; b < l.bits.size(); ++b) {
            if (l.bits[b]) mask |= (1ULL << b);
        }
        io::put_u64(out, mask);
        io::put_u64(out, l.expr_class);
    }
    io::put_u64(out, bank.world_seed);
    io::put_u64(out, bank.bits);
    io::put_u64(out, bank.expr_classes);
    io::put_u64(out, bank.world_version);
    try {
        io::write_file(path, out);
    } catch (const std::exception& e) {
        throw std::runtime_error("save_code_bank: " + std::string(e.what()));
    }
}

inline CodeBank load_code_bank(const std::string& path) {
    const std::string bytes = io::read_file(path);
    io::Reader r(bytes, path);
    if (r.str(4) != "SDCB") throw std::runtime_error("bad magic in code bank: " + path);
    const std::uint32_t ver = r.u32();
    if (ver != kCodeBankVersion) {
        throw std::runtime_error("unsupported code bank version " + std::to_string(ver) + ": " + path);
    }
    const std::size_t n = r.u64(), K = r.u64(), D = r.u64();
    CodeBank bank;
    bank.mean = Tensor({K, D});
    bank.stddev = Tensor({K, D});
    bank.codes = Tensor({n, K, D});
    for (double& d : bank.mean.data) d = r.f64();
    for (double& d : bank.stddev.data) d = r.f64();
    for (double& d : bank.codes.data) d = r.f64();
    bank.labels.resize(n);
    // bit count arrives in the trailer; masks are read back once it is known
    std::vector<std::uint64_t> masks(n);
    for (std::size_t i = 0; i < n; ++i) {
        masks[i] = r.u64();
        bank.labels[i].expr_class = r.u64();
    }
    bank.world_seed = r.u64();
    bank.bits = r.u64();
    bank.expr_classes = r.u64();
    bank.world_version = r.u64();
    for (std::size_t i = 0; i < n; ++i) {
        bank.labels[i].bits.resize(bank.bits);
        for (std::size_t b = 0; b < bank.bits; ++b) {
            bank.labels[i].bits[b] = (masks[i] >> b) & 1ULL ? 1 : 0;
        }
    }
    return bank;
}

// ---- paired dataset ----------------------------------------------------------

struct PairedRecord {
    std::size_t code_index = 0;
    std::vector<std::size_t> text_tokens;
    Tensor psi;
    AttributeLabel attrs;
};

// One record per bank code: a seeded template realization of the appearance
// bits plus a jittered expression-prototype psi.
inline std::vector<PairedRecord> make_paired_dataset(const SynthWorld& world, const CodeBank& bank,
                                                     Rng& rng) {
    if (bank.size() < 1) throw std::invalid_argument("make_paired_dataset: empty bank");
    std::vector<PairedRecord> out;
    out.reserve(bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i) {
        PairedRecord rec;
        rec.code_index = i;
        rec.attrs = bank.labels[i];
        rec.text_tokens = world.vocab().realize(rec.attrs, rng);
        rec.psi = world.psi_for(rec.attrs, rng);
        out.push_back(std::move(rec));
    }
    return out;
}

// JSON-lines: a meta line with provenance, then one record per line with
// fields {code_index, text_tokens, psi, attrs}.
inline void save_paired_dataset(const std::string& path, const std::vector<PairedRecord>& records,
                                std::uint64_t world_seed) {
    std::string out;
    nlohmann::json meta;
    meta["world_seed"] = world_seed;
    meta["world_version"] = kWorldVersion;
    meta["records"] = records.size();
    out += meta.dump();
    out += "\n";
    for (const PairedRecord& r : records) {
        nlohmann::json j;
        j["code_index"] = r.code_index;
        j["text_tokens"] = r.text_tokens;
        j["psi"] = r.psi.data;
        j["attrs"]["bits"] = r.attrs.bits;
        j["attrs"]["expr_class"] = r.attrs.expr_class;
        out += j.dump();
        out += "\n";
    }
    try {
        io::write_file(path, out);
    } catch (const std::exception& e) {
        throw std::runtime_error("save_paired_dataset: " + std::string(e.what()));
    }
}

struct PairedDataset {
    std::uint64_t world_seed = 0;
    std::vector<PairedRecord> records;
};

inline PairedDataset load_paired_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    PairedDataset ds;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (first) {
            first = false;
            ds.world_seed = j.at("world_seed").get<std::uint64_t>();
            continue;
        }
        PairedRecord r;
        r.code_index = j.at("code_index").get<std::size_t>();
        r.text_tokens = j.at("text_tokens").get<std::vector<std::size_t>>();
        std::vector<double> psi = j.at("psi").get<std::vector<double>>();
        r.psi = Tensor({psi.size()}, psi);
        r.attrs.bits = j.at("attrs").at("bits").get<std::vector<int>>();
        r.attrs.expr_class = j.at("attrs").at("expr_class").get<std::size_t>();
        ds.records.push_back(std::move(r));
    }
    if (first) throw std::runtime_error("dataset has no meta line: " + path);
    return ds;
}

}  // namespace sdlb
