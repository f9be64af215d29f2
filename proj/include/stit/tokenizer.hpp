#pragma once

// Word-level tokenizer with numeral-digit fallback. Tokens carry an
// optional leading space ("the" vs " the", "7" vs " 7"), so decoding is
// plain concatenation and every corpus string round-trips exactly.
// Special tokens match atomically and never absorb surrounding spaces.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

namespace stit {

class TokenizerError : public std::runtime_error {
public:
    explicit TokenizerError(const std::string& what) : std::runtime_error(what) {}
};

class Tokenizer {
public:
    static constexpr const char* kPad = "<PAD>";
    static constexpr const char* kUnk = "<UNK>";
    static constexpr const char* kBos = "<BOS>";
    static constexpr const char* kEos = "<EOS>";

    Tokenizer() {
        for (const char* s : {kPad, kUnk, kBos, kEos}) register_special(s);
    }

    // rule-based split; needs no vocabulary
    std::vector<std::string> split(const std::string& text) const {
        std::vector<std::string> out;
        size_t i = 0;
        bool pending_space = false;
        auto flush_space = [&] {
            if (pending_space) out.push_back(" ");
            pending_space = false;
        };
        while (i < text.size()) {
            if (size_t len = match_special(text, i)) {
                flush_space();
                out.push_back(text.substr(i, len));
                i += len;
                continue;
            }
            const char c = text[i];
            if (c == ' ') {
                if (pending_space) out.push_back(" ");
                pending_space = true;
                ++i;
                continue;
            }
            std::string piece;
            if (std::isalpha(static_cast<unsigned char>(c))) {
                size_t j = i;
                while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
                piece = text.substr(i, j - i);
                i = j;
            } else {
                piece = text.substr(i, 1);  // single digit or punctuation
                ++i;
            }
            out.push_back(pending_space ? " " + piece : piece);
            pending_space = false;
        }
        flush_space();
        return out;
    }

    // collect vocabulary from corpus texts; ids: specials first, then
    // remaining tokens sorted lexicographically. Both spacing variants of
    // each piece are registered so templates tokenize strictly regardless
    // of where a word or digit lands in a sentence.
    void build(const std::vector<std::string>& corpus) {
        std::unordered_set<std::string> seen;
        auto note = [&](const std::string& tok) {
            if (special_ids_.count(tok)) return;
            seen.insert(tok);
            if (tok == " ") return;
            if (tok[0] == ' ')
                seen.insert(tok.substr(1));
            else
                seen.insert(" " + tok);
        };
        for (const auto& text : corpus)
            for (auto& tok : split(text)) note(tok);
        std::vector<std::string> sorted(seen.begin(), seen.end());
        std::sort(sorted.begin(), sorted.end());
        for (auto& tok : sorted) {
            if (id_of_.count(tok)) continue;
            id_of_[tok] = int32_t(vocab_.size());
            vocab_.push_back(tok);
        }
    }

    std::vector<int32_t> encode(const std::string& text, bool strict = false) const {
        std::vector<int32_t> ids;
        for (auto& tok : split(text)) {
            auto it = id_of_.find(tok);
            if (it != id_of_.end()) {
                ids.push_back(it->second);
            } else if (strict) {
                throw TokenizerError("unknown token '" + tok + "'");
            } else {
                ids.push_back(unk_id());
            }
        }
        return ids;
    }

    std::string decode(const std::vector<int32_t>& ids) const {
        std::string out;
        for (int32_t id : ids) {
            if (id < 0 || id >= int32_t(vocab_.size()))
                throw TokenizerError("token id " + std::to_string(id) + " out of range");
            out += vocab_[size_t(id)];
        }
        return out;
    }

    // registers a new special token; embedding growth is the model's job
    void add_special(const std::string& token) {
        if (id_of_.count(token)) throw TokenizerError("token '" + token + "' already present");
        register_special(token);
    }

    int32_t vocab_size() const { return int32_t(vocab_.size()); }
    const std::string& token(int32_t id) const { return vocab_.at(size_t(id)); }

    int32_t id(const std::string& token) const {
        auto it = id_of_.find(token);
        if (it == id_of_.end()) throw TokenizerError("token '" + token + "' not in vocabulary");
        return it->second;
    }
    bool has(const std::string& token) const { return id_of_.count(token) != 0; }

    bool is_special(int32_t id) const {
        return id >= 0 && id < int32_t(vocab_.size()) && special_ids_.count(vocab_[size_t(id)]);
    }

    int32_t pad_id() const { return id_of_.at(kPad); }
    int32_t unk_id() const { return id_of_.at(kUnk); }
    int32_t bos_id() const { return id_of_.at(kBos); }
    int32_t eos_id() const { return id_of_.at(kEos); }

    nlohmann::json to_json() const {
        std::vector<std::string> specials(specials_ordered_.begin(), specials_ordered_.end());
        return {{"vocab", vocab_}, {"special", specials}};
    }

    static Tokenizer from_json(const nlohmann::json& j) {
        Tokenizer t;
        t.vocab_.clear();
        t.id_of_.clear();
        t.special_ids_.clear();
        t.specials_ordered_.clear();
        auto specials = j.at("special").get<std::vector<std::string>>();
        std::unordered_set<std::string> special_set(specials.begin(), specials.end());
        for (auto& tok : j.at("vocab").get<std::vector<std::string>>()) {
            if (t.id_of_.count(tok)) throw TokenizerError("duplicate token in vocabulary file");
            t.id_of_[tok] = int32_t(t.vocab_.size());
            t.vocab_.push_back(tok);
        }
        for (auto& s : specials) {
            if (!t.id_of_.count(s)) throw TokenizerError("special token missing from vocabulary");
            t.special_ids_.insert(s);
            t.specials_ordered_.push_back(s);
        }
        return t;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw TokenizerError("cannot open '" + path + "' for writing");
        out << to_json().dump(2) << "\n";
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw TokenizerError("cannot open '" + path + "'");
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

private:
    void register_special(const std::string& token) {
        id_of_[token] = int32_t(vocab_.size());
        vocab_.push_back(token);
        special_ids_.insert(token);
        specials_ordered_.push_back(token);
    }

    // longest special token matching at position i
    size_t match_special(const std::string& text, size_t i) const {
        size_t best = 0;
        for (const auto& s : specials_ordered_)
            if (s.size() > best && text.compare(i, s.size(), s) == 0) best = s.size();
        return best;
    }

    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int32_t> id_of_;
    std::unordered_set<std::string> special_ids_;
    std::vector<std::string> specials_ordered_;
};

}  // namespace stit
