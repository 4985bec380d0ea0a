// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"
#include "hoplab/model.hpp"

namespace hoplab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'R', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

class Reader {
  public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    template <typename U>
    U get(const char* what) {
        U v;
        need(sizeof(U), what);
        std::memcpy(&v, data_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    const char* raw(std::size_t n, const char* what) {
        need(n, what);
        const char* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == data_.size(); }

  private:
    void need(std::size_t n, const char* what) {
        if (data_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    std::string data_;
    std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void save_checkpoint(const Transformer<T>& model, const CheckpointInfo& info, const std::filesystem::path& path) {
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    nlohmann::json header{{"model", nlohmann::json::parse(model.config().to_json())},
                          {"step", info.step},
                          {"seed", info.seed}};
    const std::string hdr = header.dump();
    put<std::uint64_t>(out, hdr.size());
    out += hdr;
    for (const auto& [name, t] : model.params().blocks()) {
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put<std::uint8_t>(out, sizeof(T) == 4 ? 0 : 1);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t->rank()));
        for (std::size_t e : t->shape()) put<std::uint64_t>(out, e);
        out.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(T));
    }
    write_file(path, out);
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    Reader r(std::string(std::istreambuf_iterator<char>(f), {}));
    if (r.bytes(4, "magic") != std::string(kMagic, 4)) throw CheckpointError("bad checkpoint magic in " + path.string());
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto hdr_len = r.get<std::uint64_t>("header length");
    const std::string hdr = r.bytes(hdr_len, "header");
    ModelConfig cfg;
    CheckpointInfo meta;
    try {
        const auto j = nlohmann::json::parse(hdr);
        cfg = ModelConfig::from_json(j.at("model").dump());
        meta.step = j.at("step").get<long>();
        meta.seed = j.at("seed").get<std::uint64_t>();
        cfg.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    auto params = ParamSet<float>::zeros(cfg);
    for (auto& [name, t] : params.blocks()) {
        const auto name_len = r.get<std::uint16_t>("tensor name length");
        const std::string got = r.bytes(name_len, "tensor name");
        if (got != name) throw CheckpointError("expected tensor '" + name + "', found '" + got + "'");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype != 0) throw CheckpointError("tensor " + name + ": only f32 payloads can be loaded");
        const auto rank = r.get<std::uint8_t>("rank");
        std::vector<std::size_t> shape;
        for (int i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("extent")));
        if (shape != t->shape()) throw CheckpointError("tensor " + name + " has a shape that disagrees with the config");
        std::memcpy(t->data(), r.raw(t->size() * sizeof(float), "tensor payload"), t->size() * sizeof(float));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after last tensor");
    if (info != nullptr) *info = meta;
    return Model(cfg, std::move(params));
}

template void save_checkpoint<float>(const Transformer<float>&, const CheckpointInfo&, const std::filesystem::path&);
template void save_checkpoint<double>(const Transformer<double>&, const CheckpointInfo&, const std::filesystem::path&);

}  // namespace hoplab
