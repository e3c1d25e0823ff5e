#include "deltacomp/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace deltac {

using nlohmann::json;

const char* checkpoint_error_kind_name(CheckpointError::Kind k) {
    switch (k) {
        case CheckpointError::Kind::io: return "io";
        case CheckpointError::Kind::bad_magic: return "bad_magic";
        case CheckpointError::Kind::bad_version: return "bad_version";
        case CheckpointError::Kind::bad_header: return "bad_header";
        case CheckpointError::Kind::truncated: return "truncated";
        case CheckpointError::Kind::overlap: return "overlap";
    }
    return "?";
}

namespace {

constexpr size_t kAlign = 64;

size_t align_up(size_t x) { return (x + kAlign - 1) & ~(kAlign - 1); }

void put_u32le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
uint32_t get_u32le(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint64_t get_u64le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

// Little-endian f32 blob from doubles (the checkpoint storage precision).
std::string f32_blob(const std::vector<double>& v) {
    std::string out;
    out.reserve(v.size() * 4);
    for (double d : v) {
        const float f = static_cast<float>(d);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32le(out, bits);
    }
    return out;
}

std::vector<double> f32_unblob(const uint8_t* p, size_t bytes) {
    if (bytes % 4 != 0)
        throw CheckpointError(CheckpointError::Kind::bad_header, "f32 tensor length not a multiple of 4");
    std::vector<double> v(bytes / 4);
    for (size_t i = 0; i < v.size(); ++i) {
        const uint32_t bits = get_u32le(p + i * 4);
        float f;
        std::memcpy(&f, &bits, 4);
        v[i] = static_cast<double>(f);
    }
    return v;
}

std::vector<double> f64_unblob(const uint8_t* p, size_t bytes) {
    if (bytes % 8 != 0)
        throw CheckpointError(CheckpointError::Kind::bad_header, "f64 tensor length not a multiple of 8");
    std::vector<double> v(bytes / 8);
    for (size_t i = 0; i < v.size(); ++i) {
        const uint64_t bits = get_u64le(p + i * 8);
        double d;
        std::memcpy(&d, &bits, 8);
        v[i] = d;
    }
    return v;
}

struct TensorEntry {
    std::string name;
    std::string dtype; // f64, f32, i8, u4p
    std::vector<int> shape;
    std::string blob;
    std::string scales_name; // for quantized weights
};

struct Writer {
    std::vector<TensorEntry> entries;

    void add_fp(const std::string& name, const Tensor& t) {
        entries.push_back({name, "f32", t.shape(), f32_blob(t.values()), ""});
    }

    void add_quant(const std::string& name, const QuantizedTensor& q) {
        const std::string scales_name = name + ".scale";
        TensorEntry e;
        e.name = name;
        e.dtype = q.bits == 8 ? "i8" : "u4p";
        e.shape = q.shape;
        e.blob.assign(reinterpret_cast<const char*>(q.codes.data()), q.codes.size());
        e.scales_name = scales_name;
        entries.push_back(std::move(e));
        entries.push_back({scales_name, "f32",
                           {static_cast<int>(q.scales.size())}, f32_blob(q.scales), ""});
    }
};

json config_to_json(const ModelConfig& c) {
    json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["d_ffn"] = c.d_ffn;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["rms_eps"] = c.rms_eps;
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_ffn = j.at("d_ffn").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.rms_eps = j.at("rms_eps").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              std::string("bad config in header: ") + e.what());
    }
    c.validate();
    return c;
}

json plan_to_json(const SharingPlan& p) {
    json j;
    j["strategy"] = plan_strategy_name(p.strategy);
    j["protected_blocks"] = p.protected_blocks;
    json entries = json::array();
    for (const auto& e : p.entries)
        entries.push_back({{"target", e.target.str()}, {"anchor", e.anchor.str()}});
    j["entries"] = entries;
    return j;
}

SharingPlan plan_from_json(const json& j) {
    SharingPlan p;
    try {
        p.strategy = parse_plan_strategy(j.at("strategy").get<std::string>());
        for (int b : j.at("protected_blocks")) p.protected_blocks.insert(b);
        for (const auto& e : j.at("entries"))
            p.entries.push_back({WeightSite::parse(e.at("target").get<std::string>()),
                                 WeightSite::parse(e.at("anchor").get<std::string>())});
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              std::string("bad plan in header: ") + e.what());
    }
    return p;
}

// Shared writing path once the tensor list and header extras are assembled.
void write_container(const std::string& path, json header, Writer&& w) {
    json table = json::array();
    size_t offset = 0;
    for (const auto& e : w.entries) {
        json row;
        row["name"] = e.name;
        row["dtype"] = e.dtype;
        row["shape"] = e.shape;
        row["offset"] = offset;
        row["bytes"] = e.blob.size();
        if (!e.scales_name.empty()) row["scales"] = e.scales_name;
        table.push_back(std::move(row));
        offset = align_up(offset + e.blob.size());
    }
    header["tensors"] = std::move(table);

    const std::string header_str = header.dump();
    std::string out;
    out.append(kCheckpointMagic, 4);
    put_u32le(out, kCheckpointVersion);
    put_u64le(out, header_str.size());
    out += header_str;
    const size_t payload_start = align_up(out.size());
    out.resize(payload_start, '\0');
    for (const auto& e : w.entries) {
        out += e.blob;
        out.resize(align_up(out.size()), '\0');
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "short write to '" + path + "'");
}

void add_shared_tensors(Writer& w, const ModelConfig& cfg, const Tensor& embedding,
                        const std::vector<Tensor>& attn_norm, const std::vector<Tensor>& mlp_norm,
                        const Tensor& final_norm, const Tensor& output_proj) {
    w.add_fp("embedding", embedding);
    for (int l = 0; l < cfg.n_layers; ++l) {
        w.add_fp("block." + std::to_string(l) + ".attn_norm", attn_norm[static_cast<size_t>(l)]);
        w.add_fp("block." + std::to_string(l) + ".mlp_norm", mlp_norm[static_cast<size_t>(l)]);
    }
    w.add_fp("final_norm", final_norm);
    w.add_fp("output_proj", output_proj);
}

} // namespace

void save_checkpoint(const Model& m, const std::string& path) {
    json header;
    header["kind"] = "model";
    header["config"] = config_to_json(m.config);
    Writer w;
    add_shared_tensors(w, m.config, m.embedding, m.attn_norm, m.mlp_norm, m.final_norm,
                       m.output_proj);
    for (const auto& [site, t] : m.weights) w.add_fp("site." + site.str(), t);
    write_container(path, std::move(header), std::move(w));
}

void save_checkpoint(const CompressedModel& m, const std::string& path) {
    m.validate();
    json header;
    header["kind"] = "compressed";
    header["config"] = config_to_json(m.config);
    header["plan"] = plan_to_json(m.plan);
    json deltas = json::object();
    for (const auto& [site, d] : m.deltas) {
        deltas[site.str()] = {{"rank", d.rank},
                              {"scaling", d.scaling},
                              {"init", init_method_name(d.init)}};
    }
    header["deltas"] = std::move(deltas);
    if (m.quant) {
        header["quant"] = {{"bits", m.quant->bits},
                           {"strategy", strategy_name(m.quant->strategy)},
                           {"granularity", m.quant->granularity == QuantGranularity::per_row
                                               ? "per_row"
                                               : "per_tensor"}};
    }

    Writer w;
    add_shared_tensors(w, m.config, m.embedding, m.attn_norm, m.mlp_norm, m.final_norm,
                       m.output_proj);
    for (const auto& [site, sw] : m.base) {
        if (sw.quantized())
            w.add_quant("site." + site.str(), *sw.q);
        else
            w.add_fp("site." + site.str(), sw.fp);
    }
    for (const auto& [site, d] : m.deltas) {
        w.add_fp("delta." + site.str() + ".A", d.a);
        w.add_fp("delta." + site.str() + ".B", d.b);
    }
    write_container(path, std::move(header), std::move(w));
}

namespace {

struct RawTensor {
    std::string dtype;
    std::vector<int> shape;
    const uint8_t* data = nullptr;
    size_t bytes = 0;
};

struct RawContainer {
    json header;
    std::map<std::string, RawTensor> tensors;
    std::vector<uint8_t> file;
    int64_t payload_bytes = 0;

    const RawTensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw CheckpointError(CheckpointError::Kind::bad_header,
                                  "missing tensor '" + name + "' in checkpoint");
        return it->second;
    }

    Tensor fp(const std::string& name) const {
        const RawTensor& rt = get(name);
        std::vector<double> vals;
        if (rt.dtype == "f32")
            vals = f32_unblob(rt.data, rt.bytes);
        else if (rt.dtype == "f64")
            vals = f64_unblob(rt.data, rt.bytes);
        else
            throw CheckpointError(CheckpointError::Kind::bad_header,
                                  "tensor '" + name + "' has non-float dtype " + rt.dtype);
        return Tensor::from_data(rt.shape, std::move(vals));
    }

    QuantizedTensor quant(const std::string& name, const json& qmeta) const {
        const RawTensor& rt = get(name);
        QuantizedTensor q;
        q.shape = rt.shape;
        q.bits = rt.dtype == "i8" ? 8 : 4;
        q.scheme = q.bits == 8 ? QuantScheme::absmax_int8 : QuantScheme::nf4;
        q.granularity = qmeta.value("granularity", "per_row") == std::string("per_row")
                            ? QuantGranularity::per_row
                            : QuantGranularity::per_tensor;
        q.codes.assign(rt.data, rt.data + rt.bytes);
        const Tensor scales = fp(name + ".scale");
        q.scales = scales.values();
        const size_t expect = static_cast<size_t>(q.rows()) * q.row_bytes();
        if (q.codes.size() != expect)
            throw CheckpointError(CheckpointError::Kind::bad_header,
                                  "tensor '" + name + "' code length mismatch");
        return q;
    }
};

RawContainer read_container(const std::string& path) {
    RawContainer rc;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "'");
    rc.file.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());

    if (rc.file.size() < 4 || std::memcmp(rc.file.data(), kCheckpointMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic,
                              "'" + path + "' is not a DLLM checkpoint (bad magic)");
    if (rc.file.size() < 16)
        throw CheckpointError(CheckpointError::Kind::truncated, "'" + path + "' truncated prelude");
    const uint32_t version = get_u32le(rc.file.data() + 4);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported checkpoint version " + std::to_string(version));
    const uint64_t header_len = get_u64le(rc.file.data() + 8);
    if (16 + header_len > rc.file.size())
        throw CheckpointError(CheckpointError::Kind::truncated, "header extends past end of file");

    try {
        rc.header = json::parse(rc.file.begin() + 16, rc.file.begin() + 16 + header_len);
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              std::string("header is not valid JSON: ") + e.what());
    }

    const size_t payload_start = align_up(16 + header_len);
    std::vector<std::pair<size_t, size_t>> ranges;
    try {
        for (const auto& row : rc.header.at("tensors")) {
            RawTensor rt;
            rt.dtype = row.at("dtype").get<std::string>();
            rt.shape = row.at("shape").get<std::vector<int>>();
            const size_t off = row.at("offset").get<size_t>();
            rt.bytes = row.at("bytes").get<size_t>();
            const size_t abs = payload_start + off;
            if (abs + rt.bytes > rc.file.size())
                throw CheckpointError(CheckpointError::Kind::truncated,
                                      "tensor '" + row.at("name").get<std::string>() +
                                          "' extends past end of file");
            rt.data = rc.file.data() + abs;
            ranges.push_back({abs, abs + rt.bytes});
            rc.payload_bytes += static_cast<int64_t>(rt.bytes);
            rc.tensors.emplace(row.at("name").get<std::string>(), std::move(rt));
        }
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              std::string("bad tensor table: ") + e.what());
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second)
            throw CheckpointError(CheckpointError::Kind::overlap,
                                  "tensor payloads overlap in '" + path + "'");
    return rc;
}

} // namespace

const ModelConfig& LoadedCheckpoint::config() const {
    return kind == CheckpointKind::model ? model->config : compressed->config;
}

ForwardParams LoadedCheckpoint::forward_params() const {
    return kind == CheckpointKind::model ? ForwardParams::of(*model) : compressed->forward_params();
}

int64_t LoadedCheckpoint::stored_param_count() const {
    return kind == CheckpointKind::model ? count_params(*model) : compressed->stored_param_count();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    RawContainer rc = read_container(path);
    LoadedCheckpoint out;
    out.file_bytes = static_cast<int64_t>(rc.file.size());
    out.payload_bytes = rc.payload_bytes;

    std::string kind;
    json config_json;
    try {
        kind = rc.header.at("kind").get<std::string>();
        config_json = rc.header.at("config");
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              std::string("incomplete checkpoint header: ") + e.what());
    }
    const ModelConfig cfg = config_from_json(config_json);

    auto load_shared = [&](auto& m) {
        m.embedding = rc.fp("embedding");
        for (int l = 0; l < cfg.n_layers; ++l) {
            m.attn_norm.push_back(rc.fp("block." + std::to_string(l) + ".attn_norm"));
            m.mlp_norm.push_back(rc.fp("block." + std::to_string(l) + ".mlp_norm"));
        }
        m.final_norm = rc.fp("final_norm");
        m.output_proj = rc.fp("output_proj");
    };

    if (kind == "model") {
        Model m;
        m.config = cfg;
        load_shared(m);
        for (const WeightSite& site : all_sites(cfg)) m.weights.emplace(site, rc.fp("site." + site.str()));
        out.kind = CheckpointKind::model;
        out.model = std::move(m);
        return out;
    }
    if (kind != "compressed")
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              "unknown checkpoint kind '" + kind + "'");

    CompressedModel m;
    m.config = cfg;
    load_shared(m);
    if (!rc.header.contains("plan"))
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              "compressed checkpoint lacks a sharing plan");
    m.plan = plan_from_json(rc.header.at("plan"));

    json qmeta = rc.header.value("quant", json::object());
    if (!qmeta.empty()) {
        try {
            QuantPolicy pol;
            pol.bits = qmeta.at("bits").get<int>();
            pol.strategy = parse_quant_strategy(qmeta.at("strategy").get<std::string>());
            pol.granularity = qmeta.value("granularity", "per_row") == std::string("per_row")
                                  ? QuantGranularity::per_row
                                  : QuantGranularity::per_tensor;
            m.quant = pol;
        } catch (const json::exception& e) {
            throw CheckpointError(CheckpointError::Kind::bad_header,
                                  std::string("bad quant metadata: ") + e.what());
        }
    }

    const auto targets = m.plan.target_sites();
    for (const WeightSite& site : all_sites(cfg)) {
        if (targets.count(site)) continue;
        const std::string name = "site." + site.str();
        const RawTensor& rt = rc.get(name);
        if (rt.dtype == "i8" || rt.dtype == "u4p")
            m.base.emplace(site, StoredWeight{Tensor(), rc.quant(name, qmeta)});
        else
            m.base.emplace(site, StoredWeight{rc.fp(name), {}});
    }

    try {
        if (!rc.header.contains("deltas"))
            throw CheckpointError(CheckpointError::Kind::bad_header,
                                  "compressed checkpoint lacks delta metadata");
        const json& dmeta = rc.header.at("deltas");
        for (const auto& e : m.plan.entries) {
            const std::string key = e.target.str();
            const json& dj = dmeta.at(key);
            DeltaModule d;
            d.rank = dj.at("rank").get<int>();
            d.scaling = dj.at("scaling").get<double>();
            d.init = parse_init_method(dj.at("init").get<std::string>());
            d.a = rc.fp("delta." + key + ".A");
            d.b = rc.fp("delta." + key + ".B");
            m.deltas.emplace(e.target, std::move(d));
        }
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_header,
                              std::string("bad delta metadata: ") + e.what());
    }

    m.validate();
    out.kind = CheckpointKind::compressed;
    out.compressed = std::move(m);
    return out;
}

namespace {

int64_t fp_bytes(const Tensor& t) { return 4 * t.numel(); }

} // namespace

int64_t storage_bytes(const Model& m) {
    int64_t n = fp_bytes(m.embedding) + fp_bytes(m.final_norm) + fp_bytes(m.output_proj);
    for (const auto& t : m.attn_norm) n += fp_bytes(t);
    for (const auto& t : m.mlp_norm) n += fp_bytes(t);
    for (const auto& [site, t] : m.weights) n += fp_bytes(t);
    return n;
}

int64_t storage_bytes(const CompressedModel& m) {
    int64_t n = fp_bytes(m.embedding) + fp_bytes(m.final_norm) + fp_bytes(m.output_proj);
    for (const auto& t : m.attn_norm) n += fp_bytes(t);
    for (const auto& t : m.mlp_norm) n += fp_bytes(t);
    for (const auto& [site, sw] : m.base) {
        if (sw.quantized())
            n += static_cast<int64_t>(sw.q->codes.size()) + 4 * static_cast<int64_t>(sw.q->scales.size());
        else
            n += fp_bytes(sw.fp);
    }
    return n + delta_storage_bytes(m);
}

int64_t delta_storage_bytes(const CompressedModel& m) {
    int64_t n = 0;
    for (const auto& [site, d] : m.deltas) n += fp_bytes(d.a) + fp_bytes(d.b);
    return n;
}

PlanSpec parse_plan_spec(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ValueError(std::string("plan config is not valid JSON: ") + e.what());
    }
    PlanSpec spec;
    if (!j.contains("strategy")) throw ValueError("plan config: missing field 'strategy'");
    if (!j.contains("sublayer")) throw ValueError("plan config: missing field 'sublayer'");
    if (!j.contains("k")) throw ValueError("plan config: missing field 'k'");
    try {
        spec.strategy = parse_plan_strategy(j.at("strategy").get<std::string>());
        spec.sublayer = parse_sublayer_kind(j.at("sublayer").get<std::string>());
        spec.k = j.at("k").get<int>();
        if (j.contains("rank")) {
            if (j.at("rank").is_string()) {
                if (j.at("rank").get<std::string>() != "full")
                    throw ValueError("plan config: field 'rank' must be an integer or \"full\"");
                spec.rank = -1;
            } else {
                spec.rank = j.at("rank").get<int>();
            }
        }
        if (j.contains("rank_map"))
            for (const auto& [site, r] : j.at("rank_map").items())
                spec.rank_map[site] = r.get<int>();
        if (j.contains("protected_blocks")) {
            std::set<int> prot;
            for (int b : j.at("protected_blocks")) prot.insert(b);
            spec.protected_blocks = prot;
        }
    } catch (const json::exception& e) {
        throw ValueError(std::string("plan config: ") + e.what());
    }
    if (spec.k < 0) throw ValueError("plan config: field 'k' must be >= 0");
    return spec;
}

std::map<WeightSite, int> resolve_rank_map(const ModelConfig& cfg, const SharingPlan& plan,
                                           const PlanSpec& spec) {
    std::map<WeightSite, int> ranks = uniform_rank_map(cfg, plan, spec.rank);
    for (const auto& [site_str, r] : spec.rank_map) {
        const WeightSite site = WeightSite::parse(site_str);
        if (!ranks.count(site))
            throw ValueError("plan config: rank_map site " + site_str + " is not a plan target");
        const auto shape = site.matrix_shape(cfg);
        if (r < 1 || r > std::min(shape[0], shape[1]))
            throw ValueError("plan config: rank " + std::to_string(r) + " out of range at site " +
                             site_str);
        ranks[site] = r;
    }
    return ranks;
}

} // namespace deltac
