#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"
#include "charforge/rng.hpp"
#include "charforge/sft.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace charforge {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        out.push_back(std::move(word));
    }
    return out;
}

Vocab::Vocab() {
    for (auto s : {kBos, kEos, kUnk, kChat, kThink, kVqa, kKqa, kImg}) {
        add(std::string(s));
    }
}

Vocab::Vocab(const std::vector<std::string>& words) : Vocab() {
    for (const auto& w : words) {
        if (!contains(w)) {
            add(w);
        }
    }
}

void Vocab::add(const std::string& word) {
    index_.emplace(word, static_cast<int>(tokens_.size()));
    tokens_.push_back(word);
}

Vocab Vocab::from_pack(const CharacterPack& pack) {
    std::set<std::string> words;
    auto take = [&](std::string_view text) {
        for (auto& w : tokenize(text)) {
            words.insert(std::move(w));
        }
    };
    take(pack.profile);
    for (const auto& d : pack.dialogues) {
        take(d.user_input);
        take(d.response);
    }
    for (const auto& m : pack.mm_samples) {
        take(m.user_input);
        take(m.response);
        take(m.thinking);
        take(m.instruction);
    }
    for (const auto& k : pack.kqa) {
        take(k.question);
        take(k.answer);
    }
    for (const auto& v : pack.vqa) {
        take(v.question);
        take(v.answer);
    }
    for (const auto& m : pack.mcq) {
        take(m.question);
        for (const auto& o : m.options) {
            take(o);
        }
    }
    for (const auto& p : all_prompts(pack.spec.char_id)) {
        take(instruction_text(p));
    }
    return Vocab(std::vector<std::string>(words.begin(), words.end()));
}

bool Vocab::contains(std::string_view word) const { return index_.contains(std::string(word)); }

int Vocab::id(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    if (it == index_.end()) {
        throw InvalidArgument("word '" + std::string(word) + "' is not in the vocabulary");
    }
    return it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) {
        throw InvalidArgument("token id " + std::to_string(id) + " is outside the vocabulary");
    }
    return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> out;
    const int unk = id(kUnk);
    for (const auto& w : tokenize(text)) {
        const auto it = index_.find(w);
        out.push_back(it == index_.end() ? unk : it->second);
    }
    return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
        if (!out.empty()) {
            out += ' ';
        }
        out += token(i);
    }
    return out;
}

TinyLM::TinyLM(Vocab vocab, TinyLMConfig config, uint64_t init_seed) : vocab_(std::move(vocab)), config_(config) {
    if (config_.embed_dim < 1 || config_.context < 1) {
        throw InvalidArgument("lm embed_dim and context must be positive");
    }
    const Eigen::Index v = vocab_.size();
    const Eigen::Index d = config_.embed_dim;
    params_ = Eigen::VectorXd::Zero(2 * v * d + v);
    Rng rng(derive_seed(init_seed, 0x7e47));
    const double head_scale = 0.1 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < v * d; ++i) {
        params_[i] = rng.normal();
    }
    for (Eigen::Index i = v * d; i < 2 * v * d; ++i) {
        params_[i] = head_scale * rng.normal();
    }
}

Eigen::Map<const Eigen::MatrixXd> TinyLM::embeddings() const {
    return {params_.data(), config_.embed_dim, vocab_.size()};
}

Eigen::Map<const Eigen::MatrixXd> TinyLM::head() const {
    return {params_.data() + static_cast<Eigen::Index>(vocab_.size()) * config_.embed_dim, vocab_.size(),
            config_.embed_dim};
}

Eigen::Map<const Eigen::VectorXd> TinyLM::bias() const {
    return {params_.data() + 2 * static_cast<Eigen::Index>(vocab_.size()) * config_.embed_dim, vocab_.size()};
}

Eigen::VectorXd TinyLM::context_vector(std::span<const int> context, int& count, int& first) const {
    count = std::min(static_cast<int>(context.size()), config_.context);
    first = static_cast<int>(context.size()) - count;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(config_.embed_dim);
    const auto e = embeddings();
    for (int k = first; k < first + count; ++k) {
        const int id = context[static_cast<size_t>(k)];
        if (id < 0 || id >= vocab_.size()) {
            throw InvalidArgument("token id " + std::to_string(id) + " is outside the vocabulary");
        }
        h += e.col(id);
    }
    if (count > 0) {
        h /= count;
    }
    return h;
}

namespace {

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return logits.array() - lse;
}

}  // namespace

Eigen::VectorXd TinyLM::next_token_logprobs(std::span<const int> context) const {
    int count = 0;
    int first = 0;
    const Eigen::VectorXd h = context_vector(context, count, first);
    return log_softmax(head() * h + bias());
}

double TinyLM::loss_and_grad(std::span<const int> prompt, std::span<const int> target, Eigen::VectorXd* grad,
                             double scale) const {
    if (target.empty()) {
        throw InvalidArgument("cross-entropy needs a non-empty target");
    }
    const Eigen::Index v = vocab_.size();
    const Eigen::Index d = config_.embed_dim;
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.reserve(prompt.size() + target.size());
    const double per_pos = 1.0 / static_cast<double>(target.size());
    double loss = 0.0;
    for (int y : target) {
        if (y < 0 || y >= v) {
            throw InvalidArgument("target token id " + std::to_string(y) + " is outside the vocabulary");
        }
        int count = 0;
        int first = 0;
        const Eigen::VectorXd h = context_vector(seq, count, first);
        const Eigen::VectorXd lp = log_softmax(head() * h + bias());
        loss -= lp[y];
        if (grad != nullptr) {
            Eigen::VectorXd dlogits = lp.array().exp();
            dlogits[y] -= 1.0;
            dlogits *= scale * per_pos;
            Eigen::Map<Eigen::MatrixXd> ge(grad->data(), d, v);
            Eigen::Map<Eigen::MatrixXd> gw(grad->data() + v * d, v, d);
            Eigen::Map<Eigen::VectorXd> gb(grad->data() + 2 * v * d, v);
            gw.noalias() += dlogits * h.transpose();
            gb += dlogits;
            if (count > 0) {
                const Eigen::VectorXd dh = head().transpose() * dlogits / static_cast<double>(count);
                for (int k = first; k < first + count; ++k) {
                    ge.col(seq[static_cast<size_t>(k)]) += dh;
                }
            }
        }
        seq.push_back(y);
    }
    return loss * per_pos;
}

nlohmann::json TinyLM::to_json() const {
    return {{"vocab", vocab_.tokens()},
            {"embed_dim", config_.embed_dim},
            {"context", config_.context},
            {"params", std::vector<double>(params_.data(), params_.data() + params_.size())}};
}

TinyLM TinyLM::from_json(const nlohmann::json& j, const std::string& path) {
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    const auto& words = r.raw("vocab");
    if (!words.is_array()) {
        throw SchemaError(r.child("vocab"), "expected an array");
    }
    std::vector<std::string> list;
    for (const auto& w : words) {
        if (!w.is_string()) {
            throw SchemaError(r.child("vocab"), "expected strings");
        }
        list.push_back(w.get<std::string>());
    }
    Vocab vocab(list);
    if (vocab.tokens() != list) {
        throw SchemaError(r.child("vocab"), "specials must come first and words must be unique");
    }
    TinyLMConfig cfg;
    cfg.embed_dim = static_cast<int>(r.integer("embed_dim"));
    cfg.context = static_cast<int>(r.integer("context"));
    TinyLM lm(std::move(vocab), cfg, 0);
    const auto& p = r.raw("params");
    if (!p.is_array() || static_cast<Eigen::Index>(p.size()) != lm.params_.size()) {
        throw SchemaError(r.child("params"), "length does not match vocabulary and embed_dim");
    }
    for (size_t i = 0; i < p.size(); ++i) {
        if (!p[i].is_number()) {
            throw SchemaError(r.child("params") + "[" + std::to_string(i) + "]", "expected a number");
        }
        lm.params_[static_cast<Eigen::Index>(i)] = p[i].get<double>();
    }
    return lm;
}

double ce_loss(const LanguageModel& lm, std::span<const int> prompt, std::span<const int> target) {
    if (target.empty()) {
        throw InvalidArgument("cross-entropy needs a non-empty target");
    }
    for (int x : prompt) {
        if (x < 0 || x >= lm.vocab_size()) {
            throw InvalidArgument("prompt token id " + std::to_string(x) + " is outside the vocabulary");
        }
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    double loss = 0.0;
    for (int y : target) {
        if (y < 0 || y >= lm.vocab_size()) {
            throw InvalidArgument("target token id " + std::to_string(y) + " is outside the vocabulary");
        }
        loss -= lm.next_token_logprobs(seq)[y];
        seq.push_back(y);
    }
    return loss / static_cast<double>(target.size());
}

double sequence_log_likelihood(const LanguageModel& lm, std::span<const int> context,
                               std::span<const int> continuation) {
    std::vector<int> seq(context.begin(), context.end());
    double total = 0.0;
    for (int y : continuation) {
        if (y < 0 || y >= lm.vocab_size()) {
            throw InvalidArgument("token id " + std::to_string(y) + " is outside the vocabulary");
        }
        total += lm.next_token_logprobs(seq)[y];
        seq.push_back(y);
    }
    return total;
}

std::vector<int> generate(const LanguageModel& lm, const Vocab& vocab, std::vector<int> context, int max_tokens) {
    const int eos = vocab.id(Vocab::kEos);
    std::vector<int> out;
    for (int k = 0; k < max_tokens; ++k) {
        const Eigen::VectorXd lp = lm.next_token_logprobs(context);
        Eigen::Index best = 0;
        lp.maxCoeff(&best);
        const int id = static_cast<int>(best);
        if (id == eos) {
            break;
        }
        out.push_back(id);
        context.push_back(id);
    }
    return out;
}

}  // namespace charforge
