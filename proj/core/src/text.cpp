// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/text.hpp"

#include <fstream>
#include <sstream>

namespace beamvlm::text {

std::vector<int> tokenize(const std::string& s) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (unsigned char c : s) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= 0 && id < 256) {
            out.push_back(static_cast<char>(id));
        } else if (id == kBos || id == kEos) {
            continue;  // stripped
        } else {
            throw DetokenizeError("detokenize: IMG/PAD or unknown id " + std::to_string(id));
        }
    }
    return out;
}

namespace {

void substitute(std::string& s, const std::string& key, const std::string& value) {
    for (size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos)) {
        s.replace(pos, key.size(), value);
        pos += value.size();
    }
}

}  // namespace

std::string PromptTemplate::render(int m, int n_frames, int horizon) const {
    std::string out = dataset_def + "\n" + task_instruction + "\n" + context_hint;
    substitute(out, "{M}", std::to_string(m));
    substitute(out, "{N_FRAMES}", std::to_string(n_frames));
    substitute(out, "{HORIZON}", std::to_string(horizon));
    substitute(out, "{SCENARIO}", scenario_tag);
    return out;
}

PromptTemplate default_template(const std::string& scenario_tag) {
    PromptTemplate t;
    t.dataset_def = "{SCENARIO} scenario: {N_FRAMES} frames, codebook of {M} beams (1..{M}).";
    t.task_instruction =
        "Predict the next {HORIZON} beam indices. "
        "Output exactly {HORIZON} comma-separated integers.";
    t.context_hint = "Hint: beam indices usually evolve smoothly over time.";
    t.scenario_tag = scenario_tag;
    return t;
}

PromptTemplate load_template(const std::string& path, const std::string& scenario_tag) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_template: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string body = ss.str();

    // Blocks are separated by blank lines; missing blocks stay empty.
    std::vector<std::string> blocks;
    std::string current;
    std::istringstream lines(body);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) {
            if (!current.empty()) blocks.push_back(current);
            current.clear();
        } else {
            if (!current.empty()) current += "\n";
            current += line;
        }
    }
    if (!current.empty()) blocks.push_back(current);

    PromptTemplate t;
    t.scenario_tag = scenario_tag;
    if (blocks.size() > 0) t.dataset_def = blocks[0];
    if (blocks.size() > 1) t.task_instruction = blocks[1];
    if (blocks.size() > 2) t.context_hint = blocks[2];
    return t;
}

std::string build_prompt(int m, int n_frames, int horizon, const std::string& scenario_tag) {
    return default_template(scenario_tag).render(m, n_frames, horizon);
}

ParsedAnswer parse_answer(const std::string& s, int m, int horizon) {
    size_t i = 0;
    const size_t n = s.size();
    auto skip_ws = [&] {
        while (i < n && (s[i] == ' ' || s[i] == '\t' || s[i] == '\n' || s[i] == '\r')) ++i;
    };

    ParsedAnswer out;
    skip_ws();
    while (true) {
        if (i >= n)
            throw MalformedCount("parse_answer: fewer than " + std::to_string(horizon) +
                                 " integers");
        if (s[i] < '0' || s[i] > '9')
            throw SyntaxError("parse_answer: expected digit at position " + std::to_string(i));
        if (s[i] == '0') throw SyntaxError("parse_answer: leading zero");
        long value = 0;
        while (i < n && s[i] >= '0' && s[i] <= '9') {
            value = value * 10 + (s[i] - '0');
            if (value > 1000000) throw OutOfRange("parse_answer: integer too large");
            ++i;
        }
        if (value < 1 || value > m)
            throw OutOfRange("parse_answer: " + std::to_string(value) + " outside 1.." +
                             std::to_string(m));
        out.beams.push_back(static_cast<int>(value));

        if (static_cast<int>(out.beams.size()) == horizon) break;
        // Separator: comma plus optional spaces.
        skip_ws();
        if (i >= n)
            throw MalformedCount("parse_answer: fewer than " + std::to_string(horizon) +
                                 " integers");
        if (s[i] != ',')
            throw SyntaxError("parse_answer: expected ',' after integer " +
                              std::to_string(out.beams.size()));
        ++i;
        skip_ws();
    }
    skip_ws();
    if (i != n) {
        if (s[i] == ',')
            throw MalformedCount("parse_answer: more than " + std::to_string(horizon) +
                                 " integers");
        throw SyntaxError("parse_answer: trailing characters");
    }
    return out;
}

std::string format_answer(const std::vector<int>& beams, int m) {
    std::string out;
    for (size_t i = 0; i < beams.size(); ++i) {
        if (beams[i] < 1 || beams[i] > m)
            throw OutOfRange("format_answer: " + std::to_string(beams[i]) + " outside 1.." +
                             std::to_string(m));
        if (i > 0) out += ", ";
        out += std::to_string(beams[i]);
    }
    return out;
}

ParsedAnswer fallback_answer(const std::vector<int>& input_beam_history, int horizon) {
    if (input_beam_history.empty()) throw EmptyHistory("fallback_answer: empty history");
    ParsedAnswer out;
    out.beams.assign(horizon, input_beam_history.back());
    return out;
}

}  // namespace beamvlm::text
