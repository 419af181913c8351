#include "mmfa/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace mmfa {

using json = nlohmann::json;

void ModelConfig::validate() const {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (embed_dim % num_heads != 0) throw ConfigError("embed_dim must be divisible by num_heads");
    if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
    if (image_size < 1) throw ConfigError("image_size must be >= 1");
    if (image_size % patch_size != 0) throw ConfigError("image_size must be divisible by patch_size");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (max_text_len < 1) throw ConfigError("max_text_len must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::self_vision: return "self_vision";
        case BlockKind::self_text: return "self_text";
        case BlockKind::self_joint: return "self_joint";
        case BlockKind::cross_vision_to_text: return "cross_vision_to_text";
        case BlockKind::cross_text_to_vision: return "cross_text_to_vision";
    }
    return "unknown";
}

void SequenceLayout::validate() const {
    if (total <= 0) throw LayoutError("layout has no tokens");
    if (cls_index < 0 || cls_index >= total) throw LayoutError("cls index out of range");
    if (text_begin > text_end || image_begin > image_end) throw LayoutError("layout range reversed");
    if (text_end > total || image_end > total) throw LayoutError("layout range exceeds sequence");
    if (text_end > image_begin && image_end > text_begin)
        throw LayoutError("text and image ranges overlap");
}

Mat patchify(const Image& image, int patch_size) {
    if (image.height != image.width) throw InputError("patchify expects a square image");
    if (image.height % patch_size != 0) throw InputError("image size not divisible by patch size");
    int side = image.height / patch_size;
    Mat out(side * side, 3 * patch_size * patch_size);
    for (int gy = 0; gy < side; ++gy)
        for (int gx = 0; gx < side; ++gx) {
            int row = gy * side + gx, k = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < patch_size; ++dy)
                    for (int dx = 0; dx < patch_size; ++dx)
                        out(row, k++) = image.at(c, gy * patch_size + dy, gx * patch_size + dx);
        }
    return out;
}

Image unpatchify_like(const Mat& patch_grad, int image_size, int patch_size) {
    int side = image_size / patch_size;
    if (patch_grad.rows() != side * side || patch_grad.cols() != 3 * patch_size * patch_size)
        throw InputError("patch gradient shape mismatch");
    Image img(image_size, image_size);
    for (int gy = 0; gy < side; ++gy)
        for (int gx = 0; gx < side; ++gx) {
            int row = gy * side + gx, k = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < patch_size; ++dy)
                    for (int dx = 0; dx < patch_size; ++dx)
                        img.at(c, gy * patch_size + dy, gx * patch_size + dx) = patch_grad(row, k++);
        }
    return img;
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const int D = config_.embed_dim;
    const int dh = config_.head_dim();
    const int H = config_.num_heads;

    auto make_attn = [&](AttnParams& p) {
        p.wq.assign(H, Mat(D, dh));
        p.wk.assign(H, Mat(D, dh));
        p.wv.assign(H, Mat(D, dh));
        p.wo = Mat(D, D);
        p.bo = Mat(1, D);
    };
    auto make_norm = [&](Norm& n) {
        n.gamma = Mat(1, D);
        n.beta = Mat(1, D);
    };
    auto make_ffn = [&](Ffn& f) {
        f.w1 = Mat(D, 2 * D);
        f.b1 = Mat(1, 2 * D);
        f.w2 = Mat(2 * D, D);
        f.b2 = Mat(1, D);
    };

    word_emb_ = Mat(config_.vocab_size, D);
    text_pos_ = Mat(1 + config_.max_text_len, D);
    patch_proj_ = Mat(config_.patch_dim(), D);
    patch_pos_ = Mat(config_.num_patches(), D);
    cls_emb_ = Mat(1, D);

    if (config_.architecture == Architecture::single_stream) {
        single_layers_.resize(config_.num_layers);
        for (auto& l : single_layers_) {
            make_norm(l.ln_attn);
            make_attn(l.attn);
            make_norm(l.ln_ffn);
            make_ffn(l.ffn);
        }
    } else {
        dual_layers_.resize(config_.num_layers);
        for (auto& l : dual_layers_) {
            make_norm(l.ln_self_t);
            make_attn(l.self_t);
            make_norm(l.ln_self_v);
            make_attn(l.self_v);
            make_norm(l.ln_cross_t_q);
            make_norm(l.ln_cross_t_kv);
            make_attn(l.cross_t);
            make_norm(l.ln_cross_v_q);
            make_norm(l.ln_cross_v_kv);
            make_attn(l.cross_v);
            make_norm(l.ln_ffn_t);
            make_ffn(l.ffn_t);
            make_norm(l.ln_ffn_v);
            make_ffn(l.ffn_v);
        }
    }
    make_norm(ln_final_t_);
    if (config_.architecture == Architecture::dual_stream) make_norm(ln_final_v_);
    head_w_ = Mat(D, config_.num_classes);
    head_b_ = Mat(1, config_.num_classes);

    init_weights();
}

void Model::init_weights() {
    Rng rng(config_.seed);
    double bound = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim));
    auto is_bias = [](const std::string& name) {
        auto ends = [&](const char* suf) {
            std::string s(suf);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        return ends(".bo") || ends(".b1") || ends(".b2") || ends("head.b") || ends(".beta");
    };
    for (auto& [name, m] : named_parameters()) {
        if (name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0) {
            m->setOnes();
        } else if (is_bias(name)) {
            m->setZero();
        } else {
            for (Eigen::Index i = 0; i < m->rows(); ++i)
                for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = rng.uniform(-bound, bound);
        }
    }
}

std::vector<std::pair<std::string, const Mat*>> Model::named_parameters() const {
    std::vector<std::pair<std::string, const Mat*>> out;
    auto put = [&](std::string name, const Mat& m) { out.emplace_back(std::move(name), &m); };
    auto put_attn = [&](const std::string& prefix, const AttnParams& p) {
        for (size_t h = 0; h < p.wq.size(); ++h) {
            put(prefix + ".wq" + std::to_string(h), p.wq[h]);
            put(prefix + ".wk" + std::to_string(h), p.wk[h]);
            put(prefix + ".wv" + std::to_string(h), p.wv[h]);
        }
        put(prefix + ".wo", p.wo);
        put(prefix + ".bo", p.bo);
    };
    auto put_norm = [&](const std::string& prefix, const Norm& n) {
        put(prefix + ".gamma", n.gamma);
        put(prefix + ".beta", n.beta);
    };
    auto put_ffn = [&](const std::string& prefix, const Ffn& f) {
        put(prefix + ".w1", f.w1);
        put(prefix + ".b1", f.b1);
        put(prefix + ".w2", f.w2);
        put(prefix + ".b2", f.b2);
    };

    put("word_emb", word_emb_);
    put("text_pos", text_pos_);
    put("patch_proj", patch_proj_);
    put("patch_pos", patch_pos_);
    put("cls_emb", cls_emb_);
    if (config_.architecture == Architecture::single_stream) {
        for (size_t l = 0; l < single_layers_.size(); ++l) {
            std::string p = "layer" + std::to_string(l);
            const auto& L = single_layers_[l];
            put_norm(p + ".ln_attn", L.ln_attn);
            put_attn(p + ".attn", L.attn);
            put_norm(p + ".ln_ffn", L.ln_ffn);
            put_ffn(p + ".ffn", L.ffn);
        }
    } else {
        for (size_t l = 0; l < dual_layers_.size(); ++l) {
            std::string p = "layer" + std::to_string(l);
            const auto& L = dual_layers_[l];
            put_norm(p + ".ln_self_t", L.ln_self_t);
            put_attn(p + ".self_t", L.self_t);
            put_norm(p + ".ln_self_v", L.ln_self_v);
            put_attn(p + ".self_v", L.self_v);
            put_norm(p + ".ln_cross_t_q", L.ln_cross_t_q);
            put_norm(p + ".ln_cross_t_kv", L.ln_cross_t_kv);
            put_attn(p + ".cross_t", L.cross_t);
            put_norm(p + ".ln_cross_v_q", L.ln_cross_v_q);
            put_norm(p + ".ln_cross_v_kv", L.ln_cross_v_kv);
            put_attn(p + ".cross_v", L.cross_v);
            put_norm(p + ".ln_ffn_t", L.ln_ffn_t);
            put_ffn(p + ".ffn_t", L.ffn_t);
            put_norm(p + ".ln_ffn_v", L.ln_ffn_v);
            put_ffn(p + ".ffn_v", L.ffn_v);
        }
    }
    put_norm("ln_final_t", ln_final_t_);
    if (config_.architecture == Architecture::dual_stream) put_norm("ln_final_v", ln_final_v_);
    put("head.w", head_w_);
    put("head.b", head_b_);
    return out;
}

std::vector<std::pair<std::string, Mat*>> Model::named_parameters() {
    auto c = static_cast<const Model*>(this)->named_parameters();
    std::vector<std::pair<std::string, Mat*>> out;
    out.reserve(c.size());
    for (auto& [n, p] : c) out.emplace_back(n, const_cast<Mat*>(p));
    return out;
}

SequenceLayout Model::layout() const {
    SequenceLayout l;
    l.cls_index = 0;
    l.text_begin = 1;
    l.text_end = 1 + config_.max_text_len;
    l.image_begin = l.text_end;
    l.image_end = l.image_begin + config_.num_patches();
    l.total = l.image_end;
    l.validate();
    return l;
}

void Model::check_example(const MultimodalExample& example) const {
    if (example.image.height != config_.image_size || example.image.width != config_.image_size)
        throw InputError("image size mismatch: expected " + std::to_string(config_.image_size));
    if (example.image.data.size() != static_cast<size_t>(3) * config_.image_size * config_.image_size)
        throw InputError("image buffer size mismatch");
    if (static_cast<int>(example.tokens.size()) > config_.max_text_len)
        throw InputError("text longer than max_text_len");
    for (int id : example.tokens)
        if (id < 0 || id >= config_.vocab_size) throw InputError("token id out of vocab range");
}

// Per-forward tape state. Weight leaves are created up front in
// named_parameters() order so param_nodes line up with the optimizer.
struct Model::Builder {
    const Model& m;
    ag::Tape& t;
    const ForwardOptions& opts;
    PredictionOutput& out;
    int block_counter = 0;
    std::unordered_map<const Mat*, ag::Tape::Id> weight_ids;

    Builder(const Model& model, ag::Tape& tape, const ForwardOptions& o, PredictionOutput& po)
        : m(model), t(tape), opts(o), out(po) {
        for (auto& [name, p] : m.named_parameters()) {
            ag::Tape::Id id = t.leaf(*p, opts.trainable);
            weight_ids.emplace(p, id);
            if (opts.trainable) out.param_nodes.push_back(id);
        }
    }

    ag::Tape::Id w(const Mat& p) { return weight_ids.at(&p); }

    ag::Tape::Id norm(ag::Tape::Id x, const Norm& n) { return t.layer_norm(x, w(n.gamma), w(n.beta)); }

    ag::Tape::Id ffn(ag::Tape::Id x, const Ffn& f) {
        auto h = t.gelu(t.add_rowvec(t.matmul(x, w(f.w1)), w(f.b1)));
        return t.add_rowvec(t.matmul(h, w(f.w2)), w(f.b2));
    }

    ag::Tape::Id attention(ag::Tape::Id q_in, ag::Tape::Id kv_in, const AttnParams& p, BlockKind kind,
                           int layer) {
        const int H = m.config_.num_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(m.config_.head_dim()));
        std::vector<ag::Tape::Id> head_outs, attn_ids;
        for (int h = 0; h < H; ++h) {
            auto q = t.matmul(q_in, w(p.wq[h]));
            auto k = t.matmul(kv_in, w(p.wk[h]));
            auto v = t.matmul(kv_in, w(p.wv[h]));
            auto a = t.row_softmax(t.scale(t.matmul_nt(q, k), scale));
            if (opts.attn_perturb && opts.attn_perturb->block_index == block_counter &&
                opts.attn_perturb->head == h) {
                const Mat& off = opts.attn_perturb->offset;
                if (off.rows() != t.value(a).rows() || off.cols() != t.value(a).cols())
                    throw InputError("attention perturbation shape mismatch");
                a = t.add(a, t.constant(off));
            }
            // d(logit)/dA must be available even when nothing upstream of A
            // needs gradients (frozen weights, no image path through A).
            t.force_grad(a);
            attn_ids.push_back(a);
            head_outs.push_back(t.matmul(a, v));
        }
        if (opts.record) {
            AttentionBlock blk;
            blk.kind = kind;
            blk.layer = layer;
            for (auto a : attn_ids) blk.attention.push_back(t.value(a));
            out.trace.blocks.push_back(std::move(blk));
        }
        out.attn_nodes.push_back(std::move(attn_ids));
        ++block_counter;
        return t.add_rowvec(t.matmul(t.concat_cols(head_outs), w(p.wo)), w(p.bo));
    }
};

PredictionOutput Model::forward(const MultimodalExample& example, const ForwardOptions& opts) const {
    check_example(example);
    PredictionOutput out;
    out.tape = std::make_shared<ag::Tape>();
    ag::Tape& t = *out.tape;
    Builder b(*this, t, opts, out);

    TokenSeq padded = example.tokens;
    padded.resize(config_.max_text_len, 0);  // pad id 0

    auto text_x = t.embed_rows(b.w(word_emb_), padded);
    auto patches = t.leaf(patchify(example.image, config_.patch_size), true);
    out.patches_node = patches;
    auto patch_x = t.matmul(patches, b.w(patch_proj_));

    ag::Tape::Id features;
    if (config_.architecture == Architecture::single_stream) {
        auto x = t.concat_rows({b.w(cls_emb_), text_x, patch_x});
        auto pos = t.concat_rows({b.w(text_pos_), b.w(patch_pos_)});
        x = t.add(x, pos);
        for (int l = 0; l < config_.num_layers; ++l) {
            const auto& L = single_layers_[l];
            auto xn = b.norm(x, L.ln_attn);
            x = t.add(x, b.attention(xn, xn, L.attn, BlockKind::self_joint, l));
            x = t.add(x, b.ffn(b.norm(x, L.ln_ffn), L.ffn));
        }
        features = t.layer_norm(x, b.w(ln_final_t_.gamma), b.w(ln_final_t_.beta));
    } else {
        auto xt = t.add(t.concat_rows({b.w(cls_emb_), text_x}), b.w(text_pos_));
        auto xv = t.add(patch_x, b.w(patch_pos_));
        for (int l = 0; l < config_.num_layers; ++l) {
            const auto& L = dual_layers_[l];
            auto self_stage = [&] {
                xt = t.add(xt, b.attention(b.norm(xt, L.ln_self_t), b.norm(xt, L.ln_self_t), L.self_t,
                                           BlockKind::self_text, l));
                xv = t.add(xv, b.attention(b.norm(xv, L.ln_self_v), b.norm(xv, L.ln_self_v), L.self_v,
                                           BlockKind::self_vision, l));
            };
            auto cross_stage = [&] {
                // Both directions read the same pre-cross states.
                auto ct = b.attention(b.norm(xt, L.ln_cross_t_q), b.norm(xv, L.ln_cross_t_kv), L.cross_t,
                                      BlockKind::cross_text_to_vision, l);
                auto cv = b.attention(b.norm(xv, L.ln_cross_v_q), b.norm(xt, L.ln_cross_v_kv), L.cross_v,
                                      BlockKind::cross_vision_to_text, l);
                xt = t.add(xt, ct);
                xv = t.add(xv, cv);
            };
            if (config_.block_order == BlockOrder::self_then_cross) {
                self_stage();
                cross_stage();
            } else {
                cross_stage();
                self_stage();
            }
            xt = t.add(xt, b.ffn(b.norm(xt, L.ln_ffn_t), L.ffn_t));
            xv = t.add(xv, b.ffn(b.norm(xv, L.ln_ffn_v), L.ffn_v));
        }
        auto ft = t.layer_norm(xt, b.w(ln_final_t_.gamma), b.w(ln_final_t_.beta));
        auto fv = t.layer_norm(xv, b.w(ln_final_v_.gamma), b.w(ln_final_v_.beta));
        features = t.concat_rows({ft, fv});
    }
    out.features_node = features;
    out.features = t.value(features);

    auto cls_row = t.rows_slice(features, 0, 1);
    auto logits = t.add_rowvec(t.matmul(cls_row, b.w(head_w_)), b.w(head_b_));
    out.logits_node = logits;
    out.logits = t.value(logits).row(0).transpose();
    out.predicted_class = 0;
    for (int c = 1; c < config_.num_classes; ++c)
        if (out.logits[c] > out.logits[out.predicted_class]) out.predicted_class = c;

    if (opts.record) {
        out.trace.layout = layout();
        out.trace.has_gradients = false;
    }
    return out;
}

const AttentionTrace& relevance_backward(const Model& model, PredictionOutput& output, int target_class) {
    if (output.trace.empty()) throw StateError("relevance_backward needs a recorded trace (forward with record=true)");
    if (!output.tape) throw StateError("prediction output has no tape");
    if (target_class < 0 || target_class >= model.config().num_classes)
        throw InputError("target class out of range");

    ag::Tape& t = *output.tape;
    t.zero_grad();
    Mat seed = Mat::Zero(1, model.config().num_classes);
    seed(0, target_class) = 1.0;
    t.backward(output.logits_node, seed);

    for (size_t i = 0; i < output.trace.blocks.size(); ++i) {
        auto& blk = output.trace.blocks[i];
        blk.attention_grad.clear();
        for (ag::Tape::Id a : output.attn_nodes[i]) {
            // Blocks with no path to the chosen logit (e.g. the last
            // vision-side cross block in a dual-stream model) get zeros.
            if (t.has_grad(a))
                blk.attention_grad.push_back(t.grad(a));
            else
                blk.attention_grad.push_back(Mat::Zero(t.value(a).rows(), t.value(a).cols()));
        }
    }
    output.trace.has_gradients = true;
    return output.trace;
}

Image input_gradient(const Model& model, const MultimodalExample& example, const LossBuilder& loss) {
    PredictionOutput out = model.forward(example, {});
    ForwardArtifacts art;
    art.tape = out.tape.get();
    art.logits = out.logits_node;
    art.features = out.features_node;
    art.patches = out.patches_node;
    art.layout = model.layout();
    ag::Tape::Id l = loss(art);
    const Mat& lv = out.tape->value(l);
    if (lv.rows() != 1 || lv.cols() != 1) throw InputError("loss builder must produce a scalar node");
    out.tape->backward(l);
    Mat pg = out.tape->has_grad(out.patches_node)
                 ? out.tape->grad(out.patches_node)
                 : Mat::Zero(model.config().num_patches(), model.config().patch_dim());
    return unpatchify_like(pg, model.config().image_size, model.config().patch_size);
}

namespace {

const char* arch_name(Architecture a) {
    return a == Architecture::single_stream ? "single_stream" : "dual_stream";
}

Architecture arch_from(const std::string& s) {
    if (s == "single_stream") return Architecture::single_stream;
    if (s == "dual_stream") return Architecture::dual_stream;
    throw DataError("unknown architecture: " + s);
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
    const auto& c = model.config();
    json header;
    header["config"] = {
        {"architecture", arch_name(c.architecture)},
        {"num_layers", c.num_layers},
        {"num_heads", c.num_heads},
        {"embed_dim", c.embed_dim},
        {"patch_size", c.patch_size},
        {"image_size", c.image_size},
        {"vocab_size", c.vocab_size},
        {"max_text_len", c.max_text_len},
        {"num_classes", c.num_classes},
        {"seed", c.seed},
        {"block_order", c.block_order == BlockOrder::self_then_cross ? "self_then_cross" : "cross_then_self"},
    };
    auto params = model.named_parameters();
    json tensors = json::array();
    for (auto& [name, m] : params)
        tensors.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    header["tensors"] = std::move(tensors);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << kModelMagic << "\n";
    std::string h = header.dump();
    std::uint64_t len = h.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (auto& [name, m] : params)
        for (Eigen::Index i = 0; i < m->rows(); ++i)
            for (Eigen::Index j = 0; j < m->cols(); ++j) {
                double v = (*m)(i, j);
                f.write(reinterpret_cast<const char*>(&v), sizeof(v));
            }
    if (!f) throw DataError("write failed: " + path);
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open model file: " + path);
    std::string magic;
    std::getline(f, magic);
    if (magic != kModelMagic) throw DataError("bad model magic (expected " + std::string(kModelMagic) + ")");
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!f || len == 0 || len > (1ULL << 30)) throw DataError("corrupt model header length");
    std::string h(len, '\0');
    f.read(h.data(), static_cast<std::streamsize>(len));
    if (!f) throw DataError("truncated model header");

    json header;
    try {
        header = json::parse(h);
    } catch (const json::exception& e) {
        throw DataError(std::string("model header parse error: ") + e.what());
    }
    const auto& jc = header.at("config");
    ModelConfig c;
    c.architecture = arch_from(jc.at("architecture").get<std::string>());
    c.num_layers = jc.at("num_layers").get<int>();
    c.num_heads = jc.at("num_heads").get<int>();
    c.embed_dim = jc.at("embed_dim").get<int>();
    c.patch_size = jc.at("patch_size").get<int>();
    c.image_size = jc.at("image_size").get<int>();
    c.vocab_size = jc.at("vocab_size").get<int>();
    c.max_text_len = jc.at("max_text_len").get<int>();
    c.num_classes = jc.at("num_classes").get<int>();
    c.seed = jc.at("seed").get<std::uint64_t>();
    if (jc.contains("block_order"))
        c.block_order = jc.at("block_order").get<std::string>() == "cross_then_self"
                            ? BlockOrder::cross_then_self
                            : BlockOrder::self_then_cross;

    Model model(c);
    auto params = model.named_parameters();
    const auto& tensors = header.at("tensors");
    if (tensors.size() != params.size()) throw DataError("tensor manifest does not match architecture");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& [name, m] = params[i];
        const auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != name) throw DataError("tensor name mismatch: " + name);
        if (tj.at("rows").get<Eigen::Index>() != m->rows() || tj.at("cols").get<Eigen::Index>() != m->cols())
            throw DataError("tensor shape mismatch: " + name);
        for (Eigen::Index r = 0; r < m->rows(); ++r)
            for (Eigen::Index cidx = 0; cidx < m->cols(); ++cidx) {
                double v = 0;
                f.read(reinterpret_cast<char*>(&v), sizeof(v));
                (*m)(r, cidx) = v;
            }
    }
    if (!f) throw DataError("truncated model weights");
    return model;
}

}  // namespace mmfa
