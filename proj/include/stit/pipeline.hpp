#pragma once

// Glue between the data side and the model stack: instruction corpora
// paired with their source windows, sequence assembly, the joint
// language/regression/classification loss, and generation-side
// prediction for evaluation.

#include <algorithm>
#include <string>
#include <vector>

#include "stit/encoder.hpp"
#include "stit/heads.hpp"
#include "stit/lm.hpp"
#include "stit/prompt.hpp"
#include "stit/st_data.hpp"
#include "stit/tokenizer.hpp"

namespace stit {

struct PipelineConfig {
    EncoderConfig encoder;
    LMConfig lm;
    int d_prime = 128;  // regression hidden width
    int horizon = 12;   // P
    bool use_encoder = true;  // false = encoder bypassed, no substitution (the -STE ablation)
    bool classification_includes_l_r = false;
};

struct LossBreakdown {
    double l_llm = 0;
    double l_r = 0;
    double l_c = 0;
    double total = 0;
};

// an instruction record together with the window it was rendered from
struct CorpusEntry {
    InstructionRecord rec;
    WindowSample window;
};

// fills token positions from the tokenizer; the token at each recorded
// position is checked to be the special token itself
inline void finalize_positions(InstructionRecord& rec, const Tokenizer& tok) {
    const int32_t his = tok.id(kStHis);
    const int32_t pre = tok.id(kStPre);
    auto prompt_ids = tok.encode(rec.prompt_text);
    auto target_ids = tok.encode(rec.target_text);
    rec.st_his_positions.clear();
    rec.st_pre_positions.clear();
    for (size_t i = 0; i < prompt_ids.size(); ++i)
        if (prompt_ids[i] == his) rec.st_his_positions.push_back(int(i));
    for (size_t i = 0; i < target_ids.size(); ++i)
        if (target_ids[i] == pre) rec.st_pre_positions.push_back(int(prompt_ids.size() + i));
    if (int(rec.st_his_positions.size()) != rec.F)
        throw DataError("instruction: " + std::to_string(rec.st_his_positions.size()) +
                        " history tokens for F=" + std::to_string(rec.F));
}

// instruction corpus for a set of regions over a time range
inline std::vector<CorpusEntry> build_corpus(const SpatioTemporalTensor& t,
                                             const std::vector<int>& region_ids,
                                             const TimeRange& range, int H, int P, int stride,
                                             TaskKind task, const Tokenizer* tok,
                                             const PromptOptions& opts = {}) {
    std::vector<CorpusEntry> out;
    auto windows = make_windows(t, region_ids, H, P, stride, range);
    for (auto& w : windows) {
        CorpusEntry e;
        e.rec = build_instruction(w, t.regions[size_t(w.region_id)], t.time, t.feature_names,
                                  t.subject, opts);
        build_target(e.rec, w, t.feature_names, t.subject, opts.target_mode);
        e.rec.task_kind = task;
        e.rec.dataset = t.name;
        if (tok) finalize_positions(e.rec, *tok);
        e.window = std::move(w);
        out.push_back(std::move(e));
    }
    return out;
}

template <class T>
struct ModelBundle {
    PipelineConfig cfg;
    Tokenizer tokenizer;
    ParameterSet<T> params;
    StEncoder<T> encoder;
    TinyLM<T> lm;
    AlignProjection<T> align;
    RegressionHead<T> head;

    // construct modules and register/bind parameters; requires the
    // tokenizer to be ready (vocabulary fixed). With the encoder bypassed
    // the encoder and alignment have no gradient path, so their
    // parameters are not instantiated at all.
    void bind(uint64_t seed) {
        if (cfg.use_encoder) {
            encoder = StEncoder<T>(cfg.encoder);
            encoder.bind(params, seed);
            align = AlignProjection<T>(cfg.encoder.d, cfg.lm.d_model);
            align.bind(params, seed);
        }
        lm = TinyLM<T>(cfg.lm);
        lm.bind(params, tokenizer.vocab_size(), seed);
        lm.set_substitution_token(tokenizer.id(kStHis));
        lm.set_eos_token(tokenizer.eos_id());
        head = RegressionHead<T>(cfg.lm.d_model, cfg.d_prime, cfg.horizon);
        head.bind(params, seed);
    }
};

template <class T>
struct BatchResult {
    Tensor<T> total;  // scalar loss, backward-able
    LossBreakdown breakdown;
};

// teacher-forced joint loss over a batch of corpus entries
template <class T>
BatchResult<T> compute_losses(ModelBundle<T>& m, const std::vector<const CorpusEntry*>& batch) {
    if (batch.empty()) throw DataError("compute_losses: empty batch");
    const int B = int(batch.size());
    const int32_t pad = m.tokenizer.pad_id();
    const int32_t eos = m.tokenizer.eos_id();

    // per-sample sequences and alignment rows
    struct Prep {
        std::vector<int32_t> ids;
        int prompt_len = 0;
        std::vector<Tensor<T>> h_rows;  // F entries of [1, d_L]
    };
    std::vector<Prep> prep(static_cast<size_t>(B));
    int S = 0;
    for (int b = 0; b < B; ++b) {
        const auto& e = *batch[size_t(b)];
        auto& p = prep[size_t(b)];
        auto prompt_ids = m.tokenizer.encode(e.rec.prompt_text);
        auto target_ids = m.tokenizer.encode(e.rec.target_text);
        p.prompt_len = int(prompt_ids.size());
        p.ids = std::move(prompt_ids);
        p.ids.insert(p.ids.end(), target_ids.begin(), target_ids.end());
        p.ids.push_back(eos);
        S = std::max(S, int(p.ids.size()));
        if (m.cfg.use_encoder) {
            auto h = m.align.project(
                m.encoder.encode_window(e.window.history, e.window.H, e.window.F));
            for (int f = 0; f < e.window.F; ++f) p.h_rows.push_back(slice_rows(h, f, 1));
        } else {
            for (int f = 0; f < e.window.F; ++f)
                p.h_rows.push_back(Tensor<T>::zeros({1, m.cfg.lm.d_model}));
        }
        if (int(e.rec.st_pre_positions.size()) != e.window.F)
            throw DataError("compute_losses: record lacks forecasting-token positions");
    }

    // padded id matrix, teacher-forcing targets, loss mask over target tokens
    std::vector<int32_t> ids(size_t(B) * S, pad);
    std::vector<int32_t> targets(size_t(B) * S, pad);
    std::vector<uint8_t> mask(size_t(B) * S, 0);
    std::vector<Substitution<T>> subs;
    for (int b = 0; b < B; ++b) {
        const auto& e = *batch[size_t(b)];
        auto& p = prep[size_t(b)];
        const int len = int(p.ids.size());
        std::copy(p.ids.begin(), p.ids.end(), ids.begin() + size_t(b) * S);
        for (int q = 0; q + 1 < len; ++q) {
            targets[size_t(b) * S + q] = p.ids[size_t(q) + 1];
            if (q + 1 >= p.prompt_len) mask[size_t(b) * S + q] = 1;
        }
        if (m.cfg.use_encoder)
            for (int f = 0; f < e.window.F; ++f)
                subs.push_back({b, e.rec.st_his_positions[size_t(f)], p.h_rows[size_t(f)]});
    }

    auto fwd = m.lm.forward(ids, B, S, subs);
    auto l_llm = cross_entropy_masked(fwd.logits, targets, mask);

    // regression rows in (b, f) order
    std::vector<int> gamma_indices;
    std::vector<Tensor<T>> h_stack;
    std::vector<int> reg_rows, cls_rows;
    std::vector<T> reg_gt, cls_gt;
    const int P = m.cfg.horizon;
    int row = 0;
    for (int b = 0; b < B; ++b) {
        const auto& e = *batch[size_t(b)];
        for (int f = 0; f < e.window.F; ++f, ++row) {
            gamma_indices.push_back(b * S + e.rec.st_pre_positions[size_t(f)]);
            h_stack.push_back(prep[size_t(b)].h_rows[size_t(f)]);
            const bool cls = e.rec.task_kind == TaskKind::classification;
            (cls ? cls_rows : reg_rows).push_back(row);
            for (int i = 0; i < P; ++i) {
                const float y = e.window.tgt(i, f);
                if (cls)
                    cls_gt.push_back(y > 0 ? T(1) : T(0));
                else
                    reg_gt.push_back(T(y));
            }
        }
    }
    auto gamma = gather_rows(fwd.hidden, gamma_indices);
    auto h_all = stack_rows(h_stack);
    auto yhat = m.head.regress(h_all, gamma);  // [rows, P]

    Tensor<T> l_r = Tensor<T>::scalar(T(0));
    Tensor<T> l_c = Tensor<T>::scalar(T(0));
    if (!reg_rows.empty()) {
        auto pred = gather_rows(yhat, reg_rows);
        auto gt = Tensor<T>::from_vector(std::move(reg_gt), {int(reg_rows.size()), P});
        l_r = abs_error_mean(pred, gt);
    }
    if (!cls_rows.empty()) {
        auto probs = m.head.classify(gather_rows(yhat, cls_rows));
        auto labels = Tensor<T>::from_vector(std::move(cls_gt), {int(cls_rows.size()), P});
        l_c = binary_cross_entropy_mean(probs, labels);
        if (m.cfg.classification_includes_l_r) {
            auto cls_l_r = abs_error_mean(probs, labels);
            if (reg_rows.empty()) {
                l_r = cls_l_r;
            } else {
                const T wr = T(reg_rows.size()) / T(reg_rows.size() + cls_rows.size());
                const T wc = T(cls_rows.size()) / T(reg_rows.size() + cls_rows.size());
                l_r = add(scale(l_r, wr), scale(cls_l_r, wc));
            }
        }
    }

    BatchResult<T> out;
    out.total = add(add(l_llm, l_r), l_c);
    out.breakdown.l_llm = double(l_llm.item());
    out.breakdown.l_r = double(l_r.item());
    out.breakdown.l_c = double(l_c.item());
    out.breakdown.total = double(out.total.item());
    return out;
}

// generation-side prediction for one evaluation window
template <class T>
struct WindowPrediction {
    std::vector<float> yhat;          // [P, F] (time-major, like ground truth)
    std::vector<uint8_t> missing;     // per feature: no forecasting token generated
    std::string answer_text;
    std::vector<int> pre_positions;   // in the full sequence
};

template <class T>
WindowPrediction<T> predict_window(ModelBundle<T>& m, const CorpusEntry& entry,
                                   int max_new_tokens = 64) {
    NoGradGuard ng;
    const int F = entry.window.F;
    const int P = m.cfg.horizon;
    const int32_t pre = m.tokenizer.id(kStPre);

    auto prompt_ids = m.tokenizer.encode(entry.rec.prompt_text);
    std::vector<Substitution<T>> subs;
    Tensor<T> h;
    if (m.cfg.use_encoder) {
        h = m.align.project(m.encoder.encode_window(entry.window.history, entry.window.H, F));
        for (int f = 0; f < F; ++f)
            subs.push_back({0, entry.rec.st_his_positions[size_t(f)], slice_rows(h, f, 1)});
    } else {
        h = Tensor<T>::zeros({F, m.cfg.lm.d_model});
    }

    auto suffix = m.lm.generate(prompt_ids, max_new_tokens, subs);
    std::vector<int32_t> full = prompt_ids;
    full.insert(full.end(), suffix.begin(), suffix.end());

    WindowPrediction<T> out;
    out.answer_text = m.tokenizer.decode(suffix);
    for (size_t i = prompt_ids.size(); i < full.size(); ++i)
        if (full[i] == pre) out.pre_positions.push_back(int(i));

    out.yhat.assign(size_t(P) * F, 0.0f);
    out.missing.assign(size_t(F), 0);
    std::vector<int> rows_f;
    std::vector<int> gamma_idx;
    for (int f = 0; f < F; ++f) {
        if (f < int(out.pre_positions.size())) {
            rows_f.push_back(f);
            gamma_idx.push_back(out.pre_positions[size_t(f)]);
        } else {
            out.missing[size_t(f)] = 1;
        }
    }
    if (!rows_f.empty()) {
        auto fwd = m.lm.forward(full, 1, int(full.size()), subs);
        auto gamma = gather_rows(fwd.hidden, gamma_idx);
        std::vector<Tensor<T>> h_rows;
        for (int f : rows_f) h_rows.push_back(slice_rows(h, f, 1));
        auto yhat = m.head.regress(stack_rows(h_rows), gamma);  // [k, P]
        for (size_t k = 0; k < rows_f.size(); ++k)
            for (int i = 0; i < P; ++i)
                out.yhat[size_t(i) * F + rows_f[k]] = float(yhat.data()[k * size_t(P) + i]);
    }
    return out;
}

}  // namespace stit
