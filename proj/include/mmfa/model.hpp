#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmfa/autograd.hpp"
#include "mmfa/common.hpp"

namespace mmfa {

enum class Architecture { single_stream, dual_stream };

// Order of the two attention stages inside one dual-stream layer.
enum class BlockOrder { self_then_cross, cross_then_self };

struct ModelConfig {
    Architecture architecture = Architecture::single_stream;
    int num_layers = 2;
    int num_heads = 2;
    int embed_dim = 32;
    int patch_size = 8;
    int image_size = 24;
    int vocab_size = 64;
    int max_text_len = 8;
    int num_classes = 11;
    std::uint64_t seed = 1;
    BlockOrder block_order = BlockOrder::self_then_cross;  // dual-stream only

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return 3 * patch_size * patch_size; }
    int head_dim() const { return embed_dim / num_heads; }

    void validate() const;
};

// Attention block naming: "a_to_b" means queries come from stream a and
// keys/values from stream b, so the matrix is [tokens_a, tokens_b].
enum class BlockKind {
    self_vision,
    self_text,
    self_joint,
    cross_vision_to_text,
    cross_text_to_vision,
};

const char* block_kind_name(BlockKind k);

// Token index ranges in the flattened sequence. Both architectures use the
// same global order: [CLS, text tokens, image tokens]; for dual-stream models
// CLS + text form the text stream and the image tokens form the vision stream.
struct SequenceLayout {
    int cls_index = 0;
    int text_begin = 0, text_end = 0;    // [begin, end)
    int image_begin = 0, image_end = 0;  // [begin, end)
    int total = 0;

    int text_len() const { return text_end - text_begin; }
    int image_len() const { return image_end - image_begin; }
    void validate() const;
};

struct AttentionBlock {
    BlockKind kind = BlockKind::self_joint;
    int layer = 0;
    std::vector<Mat> attention;       // per head, rows sum to 1
    std::vector<Mat> attention_grad;  // per head, empty until relevance_backward
};

struct AttentionTrace {
    std::vector<AttentionBlock> blocks;
    SequenceLayout layout;
    bool has_gradients = false;

    bool empty() const { return blocks.empty(); }
};

// Additive offset applied to one head's post-softmax attention matrix.
// Exists so the finite-difference tests can probe d(logit)/dA directly.
struct AttentionPerturbation {
    int block_index = 0;  // creation order, matches trace block order
    int head = 0;
    Mat offset;
};

struct ForwardOptions {
    bool record = false;
    bool trainable = false;  // give weight leaves gradients (training)
    std::optional<AttentionPerturbation> attn_perturb;
};

struct PredictionOutput {
    Vec logits;
    int predicted_class = 0;
    AttentionTrace trace;  // populated when record=true
    Mat features;          // final-layer hidden states, [layout.total, embed_dim]

    // Gradient plumbing for relevance_backward / input_gradient / training.
    std::shared_ptr<ag::Tape> tape;
    ag::Tape::Id logits_node = -1;
    ag::Tape::Id features_node = -1;
    ag::Tape::Id patches_node = -1;
    std::vector<std::vector<ag::Tape::Id>> attn_nodes;  // per block, per head
    std::vector<ag::Tape::Id> param_nodes;              // trainable runs only
};

// Handles a loss builder needs to assemble an objective on the forward tape.
struct ForwardArtifacts {
    ag::Tape* tape = nullptr;
    ag::Tape::Id logits = -1;
    ag::Tape::Id features = -1;
    ag::Tape::Id patches = -1;
    SequenceLayout layout;
};

using LossBuilder = std::function<ag::Tape::Id(ForwardArtifacts&)>;

class Model {
public:
    explicit Model(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    SequenceLayout layout() const;

    // Runs one example through the network. Immutable w.r.t. the model; safe
    // to call concurrently from multiple threads.
    PredictionOutput forward(const MultimodalExample& example, const ForwardOptions& opts = {}) const;

    // Flat named weight list in a fixed order (checkpoint + optimizer order).
    std::vector<std::pair<std::string, Mat*>> named_parameters();
    std::vector<std::pair<std::string, const Mat*>> named_parameters() const;

private:
    struct AttnParams {
        std::vector<Mat> wq, wk, wv;  // per head [D, head_dim]
        Mat wo;                       // [D, D]
        Mat bo;                       // [1, D]
    };
    struct Norm {
        Mat gamma, beta;  // [1, D]
    };
    struct Ffn {
        Mat w1, b1, w2, b2;
    };
    struct SingleLayer {
        Norm ln_attn;
        AttnParams attn;
        Norm ln_ffn;
        Ffn ffn;
    };
    struct DualLayer {
        Norm ln_self_t;
        AttnParams self_t;
        Norm ln_self_v;
        AttnParams self_v;
        Norm ln_cross_t_q, ln_cross_t_kv;
        AttnParams cross_t;  // text queries vision
        Norm ln_cross_v_q, ln_cross_v_kv;
        AttnParams cross_v;  // vision queries text
        Norm ln_ffn_t;
        Ffn ffn_t;
        Norm ln_ffn_v;
        Ffn ffn_v;
    };

    struct Builder;  // per-forward tape state

    void init_weights();
    void check_example(const MultimodalExample& example) const;

    ModelConfig config_;
    Mat word_emb_;    // [vocab, D]
    Mat text_pos_;    // [1 + max_text_len, D]
    Mat patch_proj_;  // [patch_dim, D]
    Mat patch_pos_;   // [num_patches, D]
    Mat cls_emb_;     // [1, D]
    std::vector<SingleLayer> single_layers_;
    std::vector<DualLayer> dual_layers_;
    Norm ln_final_t_, ln_final_v_;  // single-stream uses ln_final_t_ only
    Mat head_w_, head_b_;
};

inline Model build_model(const ModelConfig& config) { return Model(config); }

// Fills trace.attention_grad with d(logits[target_class])/dA for every block.
// Requires forward(record=true). Model weights are untouched.
const AttentionTrace& relevance_backward(const Model& model, PredictionOutput& output, int target_class);

// Exact reverse-mode gradient of the built loss w.r.t. image pixels.
Image input_gradient(const Model& model, const MultimodalExample& example, const LossBuilder& loss);

// Patch flattening used by the vision path: row-major patch grid, each row
// ordered (channel, dy, dx).
Mat patchify(const Image& image, int patch_size);
Image unpatchify_like(const Mat& patch_grad, int image_size, int patch_size);

// Checkpoint format: magic line, length-prefixed JSON header (config + tensor
// manifest), then raw little-endian doubles.
inline constexpr const char* kModelMagic = "MMFA-MODEL-v1";
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace mmfa
