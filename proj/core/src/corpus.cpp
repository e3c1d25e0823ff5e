#include "deltacomp/corpus.hpp"

#include <filesystem>
#include <fstream>

namespace deltac {

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string detokenize(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id == kBosId || id == kEosId) continue;
        if (id < 0 || id >= kVocabBytes)
            throw ValueError("detokenize: id " + std::to_string(id) + " is not a byte token");
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ValueError("unknown split '" + std::string(name) + "' (expected train|val|test)");
}

std::span<const int> Corpus::split(Split s) const {
    switch (s) {
        case Split::train: return {tokens.data(), train_end};
        case Split::val: return {tokens.data() + train_end, val_end - train_end};
        case Split::test: return {tokens.data() + val_end, tokens.size() - val_end};
    }
    return {};
}

Corpus corpus_from_text(std::string id, std::string_view text, uint64_t seed) {
    if (text.empty()) throw ValueError("corpus '" + id + "' is empty");
    Corpus c;
    c.id = std::move(id);
    c.tokens = tokenize(text);
    c.seed = seed;
    const size_t n = c.tokens.size();
    c.train_end = n * 8 / 10;
    c.val_end = c.train_end + n / 10;
    return c;
}

Corpus load_corpus(const std::string& path, uint64_t seed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("cannot open corpus file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return corpus_from_text(std::filesystem::path(path).filename().string(), text, seed);
}

} // namespace deltac
