// Deterministic synthetic text generator for test and benchmark corpora.
// Stage one builds template prose from fixed word lists; stage two fits an
// order-1 character chain on it and emits from the chain. The final stream
// keeps English-like letter statistics while every dependency is strictly
// one character long. Identical (seed, bytes) arguments always produce
// identical output.

#include <array>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "deltacomp/common.hpp"

namespace {

using deltac::Rng;

const std::vector<std::string> kNouns = {
    "river",   "mountain", "engine",  "garden",   "library", "harbor",  "signal",  "window",
    "teacher", "compass",  "lantern", "bridge",   "meadow",  "orchard", "village", "machine",
    "letter",  "journey",  "market",  "telescope", "forest",  "island",  "ladder",  "mirror",
    "anchor",  "bottle",   "candle",  "stone",    "valley",  "thread",  "needle",  "basket",
    "wheel",   "tower",    "road",    "storm",    "harvest", "melody",  "shadow",  "ember"};

const std::vector<std::string> kVerbs = {
    "carries", "follows", "builds",  "watches", "crosses", "repairs", "gathers", "measures",
    "guards",  "opens",   "closes",  "lifts",   "turns",   "reaches", "signals", "shelters",
    "records", "traces",  "holds",   "answers", "borrows", "returns", "studies", "paints"};

const std::vector<std::string> kAdjectives = {
    "quiet",  "bright",  "narrow", "ancient", "gentle", "crooked", "hollow", "patient",
    "silver", "distant", "steady", "curious", "warm",   "heavy",   "pale",   "sudden",
    "round",  "early",   "late",   "simple",  "clever", "wooden",  "frozen", "amber"};

const std::vector<std::string> kAdverbs = {"slowly",  "quietly", "carefully", "often",
                                           "rarely",  "together", "alone",    "again",
                                           "finally", "easily",  "gladly",    "soon"};

const std::vector<std::string> kNames = {"Mara", "Theo", "Ines", "Odell", "Petra", "Ruben",
                                         "Sana", "Viktor", "Wren", "Yara", "Anselm", "Beatrix"};

const std::vector<std::string> kPlaces = {"harbor", "valley", "village", "orchard", "tower",
                                          "library", "market", "meadow",  "island",  "mill"};

const std::string& pick(const std::vector<std::string>& v, Rng& rng) {
    return v[static_cast<size_t>(rng.uniform_int(v.size()))];
}

std::string sentence(Rng& rng) {
    std::string s;
    switch (rng.uniform_int(6)) {
        case 0:
            s = "The " + pick(kAdjectives, rng) + " " + pick(kNouns, rng) + " " +
                pick(kVerbs, rng) + " the " + pick(kNouns, rng);
            break;
        case 1:
            s = pick(kNames, rng) + " " + pick(kVerbs, rng) + " a " + pick(kAdjectives, rng) +
                " " + pick(kNouns, rng) + " in the " + pick(kPlaces, rng);
            break;
        case 2:
            s = "A " + pick(kNouns, rng) + " near the " + pick(kPlaces, rng) + " " +
                pick(kVerbs, rng) + " " + pick(kAdverbs, rng);
            break;
        case 3:
            s = pick(kNames, rng) + " and " + pick(kNames, rng) + " " + pick(kAdverbs, rng) +
                " " + pick(kVerbs, rng) + " the " + pick(kAdjectives, rng) + " " +
                pick(kNouns, rng);
            break;
        case 4:
            s = "Every " + pick(kNouns, rng) + " " + pick(kVerbs, rng) + " its " +
                pick(kAdjectives, rng) + " " + pick(kNouns, rng);
            break;
        default:
            s = "In the " + pick(kPlaces, rng) + ", the " + pick(kNouns, rng) + " " +
                pick(kVerbs, rng) + " " + pick(kAdverbs, rng);
            break;
    }
    if (rng.uniform_int(8) == 0)
        s += ", and the " + pick(kNouns, rng) + " " + pick(kVerbs, rng) + " " +
             pick(kAdverbs, rng);
    if (rng.uniform_int(12) == 0)
        s += " for " + std::to_string(2 + rng.uniform_int(98)) + " days";
    s += rng.uniform_int(10) == 0 ? "!" : ".";
    return s;
}

std::string template_prose(Rng& rng, size_t target_bytes) {
    std::string text;
    text.reserve(target_bytes + 256);
    while (text.size() < target_bytes) {
        const int n_sentences = 3 + static_cast<int>(rng.uniform_int(5));
        for (int i = 0; i < n_sentences && text.size() < target_bytes; ++i) {
            text += sentence(rng);
            text += (i + 1 < n_sentences) ? " " : "";
        }
        text += "\n\n";
    }
    return text;
}

// order-1 character chain fitted on the prose sample
struct CharChain {
    std::array<std::array<uint32_t, 256>, 256> counts{};
    std::array<uint32_t, 256> totals{};

    static CharChain fit(const std::string& sample) {
        CharChain c;
        for (size_t i = 0; i + 1 < sample.size(); ++i) {
            const auto cur = static_cast<unsigned char>(sample[i]);
            const auto nxt = static_cast<unsigned char>(sample[i + 1]);
            ++c.counts[cur][nxt];
            ++c.totals[cur];
        }
        return c;
    }

    char step(unsigned char cur, Rng& rng) const {
        const uint32_t total = totals[cur];
        if (total == 0) return ' ';
        uint64_t r = rng.uniform_int(total);
        for (int nxt = 0; nxt < 256; ++nxt) {
            const uint32_t n = counts[cur][static_cast<size_t>(nxt)];
            if (r < n) return static_cast<char>(nxt);
            r -= n;
        }
        return ' ';
    }
};

} // namespace

int main(int argc, char** argv) {
    uint64_t seed = 7;
    size_t target_bytes = 1 << 20;
    std::string out_path;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        auto next = [&](const char* name) -> std::string {
            if (i + 1 >= argc) {
                std::cerr << "error: " << name << " needs a value\n";
                std::exit(1);
            }
            return argv[++i];
        };
        if (arg == "--seed") seed = std::stoull(next("--seed"));
        else if (arg == "--bytes") target_bytes = std::stoull(next("--bytes"));
        else if (arg == "--out") out_path = next("--out");
        else {
            std::cerr << "usage: gen_corpus [--seed N] [--bytes N] [--out FILE]\n";
            return arg == "--help" || arg == "-h" ? 0 : 1;
        }
    }

    Rng rng(seed);
    const std::string sample = template_prose(rng, 256 * 1024);
    const CharChain chain = CharChain::fit(sample);

    std::string text;
    text.reserve(target_bytes);
    unsigned char cur = 'T';
    text.push_back(static_cast<char>(cur));
    while (text.size() < target_bytes) {
        const char nxt = chain.step(cur, rng);
        text.push_back(nxt);
        cur = static_cast<unsigned char>(nxt);
    }
    text.resize(target_bytes);

    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) {
            std::cerr << "error: cannot write " << out_path << "\n";
            return 1;
        }
        out << text;
    }
    return 0;
}
