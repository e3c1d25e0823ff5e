#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deltacomp/common.hpp"

namespace deltac {

// Byte-level vocabulary: ids 0..255 are raw bytes, plus BOS/EOS markers.
constexpr int kVocabBytes = 256;
constexpr int kBosId = 256;
constexpr int kEosId = 257;
constexpr int kVocabSize = 258;

std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> ids); // BOS/EOS ids are skipped

enum class Split { train, val, test };
const char* split_name(Split s);
Split parse_split(std::string_view name);

// Tokenized text with a deterministic contiguous 80/10/10 split. The seed is
// carried along for batch shuffling downstream; it does not affect the split.
struct Corpus {
    std::string id;          // basename of the source file
    std::vector<int> tokens; // whole corpus, in order
    size_t train_end = 0;    // tokens[0, train_end) is the train split
    size_t val_end = 0;      // tokens[train_end, val_end) is the val split
    uint64_t seed = 0;

    std::span<const int> split(Split s) const;
    size_t size() const { return tokens.size(); }
};

Corpus load_corpus(const std::string& path, uint64_t seed);
Corpus corpus_from_text(std::string id, std::string_view text, uint64_t seed);

} // namespace deltac
