// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace beamvlm::text {

// Byte-level vocabulary: ids 0..255 are raw bytes, then the specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kImg = 259;  // placeholder id for a visual-token position
inline constexpr int kVocabSize = 260;

struct DetokenizeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MalformedCount : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OutOfRange : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SyntaxError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyHistory : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<int> tokenize(const std::string& s);

/// Inverse of tokenize; BOS/EOS are stripped, IMG/PAD raise DetokenizeError.
std::string detokenize(const std::vector<int>& ids);

/// Exactly `horizon` beam indices, each in 1..M.
struct ParsedAnswer {
    std::vector<int> beams;
};

/// Three-block instructional prompt. Blocks render in fixed order:
/// dataset definition, task instruction + format constraint, context hint.
struct PromptTemplate {
    std::string dataset_def;
    std::string task_instruction;
    std::string context_hint;
    std::string scenario_tag = "UAV";

    std::string render(int m, int n_frames, int horizon) const;
};

PromptTemplate default_template(const std::string& scenario_tag = "UAV");

/// Load a template from a UTF-8 file with {M}, {N_FRAMES}, {HORIZON} and
/// {SCENARIO} placeholders; blocks are separated by blank lines.
PromptTemplate load_template(const std::string& path, const std::string& scenario_tag = "UAV");

std::string build_prompt(int m, int n_frames, int horizon, const std::string& scenario_tag);

/// Strict grammar: optional whitespace, `horizon` decimal integers separated
/// by a comma plus optional spaces, optional trailing whitespace. Each
/// integer must be in 1..m with no leading zeros or signs.
ParsedAnswer parse_answer(const std::string& s, int m, int horizon);

/// Canonical "a, b, c, d, e" rendering; parse_answer inverts it.
std::string format_answer(const std::vector<int>& beams, int m);

/// Recovery when generation violates the grammar: repeat the last observed
/// input beam index over the horizon.
ParsedAnswer fallback_answer(const std::vector<int>& input_beam_history, int horizon = 5);

}  // namespace beamvlm::text
