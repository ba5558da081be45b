#include "fvlm/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "fvlm/errors.hpp"
#include "fvlm/hash.hpp"
#include "nlohmann/json.hpp"

namespace fvlm {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

class Reader {
public:
    Reader(const std::string& buf, std::size_t limit) : buf_(buf), limit_(limit) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= std::uint32_t(std::uint8_t(buf_[pos_ + std::size_t(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= std::uint64_t(std::uint8_t(buf_[pos_ + std::size_t(i)])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return static_cast<double>(f);
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) {
        if (pos_ + n > limit_)
            throw CorruptionError("truncated checkpoint");
    }
    const std::string& buf_;
    std::size_t limit_;
    std::size_t pos_ = 0;
};

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"image_size", cfg.image_size},
                          {"patch_size", cfg.patch_size},
                          {"embed_dim", cfg.embed_dim},
                          {"encoder_layers", cfg.encoder_layers},
                          {"decoder_layers", cfg.decoder_layers},
                          {"heads", cfg.heads},
                          {"vocab_size", cfg.vocab_size},
                          {"max_tokens", cfg.max_tokens},
                          {"sign_count", cfg.sign_count},
                          {"ffn_hidden", cfg.ffn_hidden},
                          {"sign_threshold", cfg.sign_threshold},
                          {"pooled_projector_input", cfg.pooled_projector_input}};
}

ModelConfig config_from_json(const std::string& text) {
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        ModelConfig cfg;
        cfg.image_size = j.at("image_size").get<std::size_t>();
        cfg.patch_size = j.at("patch_size").get<std::size_t>();
        cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
        cfg.encoder_layers = j.at("encoder_layers").get<std::size_t>();
        cfg.decoder_layers = j.at("decoder_layers").get<std::size_t>();
        cfg.heads = j.at("heads").get<std::size_t>();
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.max_tokens = j.at("max_tokens").get<std::size_t>();
        cfg.sign_count = j.at("sign_count").get<std::size_t>();
        cfg.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
        cfg.sign_threshold = j.at("sign_threshold").get<double>();
        cfg.pooled_projector_input = j.at("pooled_projector_input").get<bool>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint config block: ") + e.what());
    } catch (const ContractError& e) {
        throw CorruptionError(std::string("checkpoint config block: ") + e.what());
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& model,
                     const OptimizerState* state) {
    std::string out;
    out.append("VUKP");
    put_u32(out, kCheckpointVersion);

    const std::string cfg = config_to_json(model.config()).dump();
    put_u64(out, cfg.size());
    out.append(cfg);

    put_u32(out, std::uint32_t(model.params().size()));
    for (const Param& p : model.params()) {
        put_u32(out, std::uint32_t(p.name.size()));
        out.append(p.name);
        put_u32(out, std::uint32_t(p.shape.size()));
        for (std::size_t d : p.shape) put_u64(out, d);
        for (double v : p.value) put_f32(out, v);
    }

    out.push_back(state ? char(1) : char(0));
    if (state) {
        put_u64(out, state->step);
        for (const Param& p : model.params()) {
            auto mi = state->m.find(p.name);
            auto vi = state->v.find(p.name);
            if (mi == state->m.end() || vi == state->v.end() ||
                mi->second.size() != p.value.size() ||
                vi->second.size() != p.value.size())
                throw ContractError("save_checkpoint: optimizer moments for '" +
                                    p.name + "' do not match the parameter");
            for (double v : mi->second) put_f32(out, v);
            for (double v : vi->second) put_f32(out, v);
        }
    }

    put_u64(out, fnv1a64(out.data(), out.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("save_checkpoint: cannot open '" + path + "'");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw ContractError("save_checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("load_checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

    if (buf.size() < 4 + 4 + 8) throw CorruptionError("truncated checkpoint");
    if (buf.compare(0, 4, "VUKP") != 0)
        throw CorruptionError("'" + path + "' is not a checkpoint file");

    Reader header(buf, buf.size());
    header.bytes(4);
    const std::uint32_t version = header.u32();
    if (version != kCheckpointVersion)
        throw MigrationError("checkpoint version " + std::to_string(version) +
                             " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");

    const std::size_t body_end = buf.size() - 8;
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i)
        stored |= std::uint64_t(std::uint8_t(buf[body_end + std::size_t(i)]))
                  << (8 * i);
    if (fnv1a64(buf.data(), body_end) != stored)
        throw CorruptionError("checkpoint hash mismatch in '" + path + "'");

    Reader r(buf, body_end);
    r.bytes(4);
    r.u32();  // version, already checked

    const std::uint64_t cfg_len = r.u64();
    const ModelConfig cfg = config_from_json(r.bytes(cfg_len));

    LoadedCheckpoint out;
    out.model = make_params_shell(cfg);

    const std::uint32_t count = r.u32();
    if (count != out.model.params().size())
        throw CorruptionError("checkpoint holds " + std::to_string(count) +
                              " parameters, config implies " +
                              std::to_string(out.model.params().size()));
    for (Param& p : out.model.params()) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        if (name != p.name)
            throw CorruptionError("checkpoint parameter '" + name +
                                  "' where '" + p.name + "' was expected");
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = r.u64();
        if (shape != p.shape)
            throw CorruptionError("checkpoint parameter '" + name +
                                  "' has shape " + shape_str(shape) +
                                  ", expected " + shape_str(p.shape));
        for (double& v : p.value) v = r.f32();
    }

    const std::string flag = r.bytes(1);
    if (flag[0] != 0 && flag[0] != 1)
        throw CorruptionError("checkpoint optimizer flag is invalid");
    if (flag[0] == 1) {
        out.has_state = true;
        out.state.step = r.u64();
        for (const Param& p : out.model.params()) {
            std::vector<double>& m = out.state.m[p.name];
            std::vector<double>& v = out.state.v[p.name];
            m.resize(p.value.size());
            v.resize(p.value.size());
            for (double& x : m) x = r.f32();
            for (double& x : v) x = r.f32();
        }
    }

    if (r.pos() != body_end)
        throw CorruptionError("checkpoint has trailing bytes");
    return out;
}

}  // namespace fvlm
