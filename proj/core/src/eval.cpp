// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/eval.hpp"

#include "beamvlm/text.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace beamvlm::eval {

double topk_accuracy(const std::vector<RankedPrediction>& preds,
                     const std::vector<std::vector<int>>& labels, int k, int horizon_step) {
    if (preds.size() != labels.size())
        throw LengthMismatch("topk_accuracy: " + std::to_string(preds.size()) +
                             " predictions vs " + std::to_string(labels.size()) + " labels");
    if (k < 1) throw LengthMismatch("topk_accuracy: k must be >= 1");
    if (preds.empty()) throw EmptyReport("topk_accuracy: no samples");
    long hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& ranking = preds[i].steps.at(horizon_step);
        const int label = labels[i].at(horizon_step);
        const auto end = ranking.begin() + std::min<std::size_t>(k, ranking.size());
        if (std::find(ranking.begin(), end, label) != end) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::vector<int> fallback_ranking(int beam, int num_beams) {
    std::vector<int> out;
    out.reserve(num_beams);
    out.push_back(beam);
    for (int d = 1; static_cast<int>(out.size()) < num_beams; ++d) {
        if (beam - d >= 1) out.push_back(beam - d);
        if (beam + d <= num_beams) out.push_back(beam + d);
    }
    return out;
}

namespace {

/// Descending score order; equal scores resolve to the smaller beam index.
std::vector<int> rank_by_score(const std::vector<float>& scores) {
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    for (auto& i : idx) i += 1;
    return idx;
}

}  // namespace

RankFn vlm_predictor(const vlm::BeamVlmModel& model, const std::string& prompt,
                     int codebook_size) {
    const vlm::BeamVlmModel* m = &model;
    const std::string p = prompt;
    return [m, p, codebook_size](const scene::Sample& sample) {
        const int M = codebook_size;
        const int horizon = m->cfg.horizon;
        auto session = vlm::make_prefix_session(*m, sample.frames, p);
        const auto prefix = session.snapshot();

        const std::string raw = vlm::generate(*m, session);
        RankedPrediction rp;
        std::vector<int> beams;
        try {
            beams = text::parse_answer(raw, M, horizon).beams;
            rp.valid = true;
        } catch (const std::runtime_error&) {
            rp.valid = false;
            beams = text::fallback_answer(sample.input_beams, horizon).beams;
        }

        if (!rp.valid) {
            for (int j = 0; j < horizon; ++j)
                rp.steps.push_back(fallback_ranking(beams[j], M));
            return rp;
        }

        // Constrained per-step rescoring conditioned on the canonical
        // rendering of the greedy answer.
        session.restore(prefix);
        for (int j = 0; j < horizon; ++j) {
            rp.steps.push_back(rank_by_score(vlm::score_candidates(*m, session, j, M)));
            std::string cond = std::to_string(beams[j]);
            if (j + 1 < horizon) cond += ", ";
            session.feed_tokens(text::tokenize(cond));
        }
        session.restore(prefix);
        return rp;
    };
}

RankFn baseline_predictor(const baseline::RecurrentClassifier& clf) {
    const baseline::RecurrentClassifier* c = &clf;
    return [c](const scene::Sample& sample) {
        const auto probs = baseline::baseline_forward(*c, sample.frames);
        RankedPrediction rp;
        for (int r = 0; r < probs.rows(); ++r) {
            std::vector<float> row(probs.cols());
            for (int j = 0; j < probs.cols(); ++j) row[j] = probs(r, j);
            rp.steps.push_back(rank_by_score(row));
        }
        return rp;
    };
}

RankFn oracle_predictor(const phy::BeamCodebook& cb, const scene::WorldConfig& world,
                        int detection_threshold) {
    return [cb, world, detection_threshold](const scene::Sample& sample) {
        RankedPrediction rp;
        std::vector<int> beams;
        try {
            beams = baseline::oracle_pixel_baseline(sample.frames, cb, world,
                                                    detection_threshold,
                                                    static_cast<int>(sample.target_beams.size()));
        } catch (const baseline::UavNotFound&) {
            rp.valid = false;
            beams = text::fallback_answer(sample.input_beams,
                                          static_cast<int>(sample.target_beams.size()))
                        .beams;
        }
        for (int b : beams) rp.steps.push_back(fallback_ranking(b, cb.num_beams));
        return rp;
    };
}

MetricsTable evaluate(const std::string& name, const RankFn& predictor,
                      const scene::Dataset& dataset) {
    const auto idx = dataset.indices(scene::Split::kTest);
    if (idx.empty()) throw EmptyReport("evaluate: empty test split");

    std::vector<RankedPrediction> preds;
    std::vector<std::vector<int>> labels;
    preds.reserve(idx.size());
    long invalid = 0;
    for (int i : idx) {
        const auto sample = dataset.load_sample(i);
        auto rp = predictor(sample);
        if (!rp.valid) ++invalid;
        preds.push_back(std::move(rp));
        labels.push_back(sample.target_beams);
    }

    MetricsTable table;
    table.predictor = name;
    table.horizon = static_cast<int>(labels.front().size());
    table.n = static_cast<long>(preds.size());
    table.invalid_rate = static_cast<double>(invalid) / static_cast<double>(preds.size());
    for (int step = 0; step < table.horizon; ++step) {
        std::array<double, 4> row{};
        for (std::size_t i = 0; i < kReportKs.size(); ++i)
            row[i] = topk_accuracy(preds, labels, kReportKs[i], step);
        table.topk.push_back(row);
    }
    return table;
}

AblationReport ablate_prompt(const vlm::BeamVlmModel& model, const scene::Dataset& dataset,
                             const std::vector<std::pair<std::string, std::string>>& variants) {
    if (variants.size() < 2)
        throw EmptyReport("ablate_prompt: need the full prompt plus at least one variant");
    AblationReport report;
    for (const auto& [name, prompt] : variants) {
        report.names.push_back(name);
        report.tables.push_back(evaluate(name, vlm_predictor(model, prompt), dataset));
    }
    return report;
}

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw train::IoError("cannot open " + path + " for writing");
    return out;
}

}  // namespace

void emit_csv(const std::vector<MetricsTable>& tables, const std::string& path) {
    if (tables.empty()) throw EmptyReport("emit_csv: no tables");
    auto out = open_out(path);
    out << "predictor,horizon,top1,top2,top3,top5,n,invalid_rate\n";
    out << std::setprecision(10);
    for (const auto& t : tables) {
        for (int step = 0; step < t.horizon; ++step) {
            out << t.predictor << ',' << (step + 1);
            for (double v : t.topk[step]) out << ',' << v;
            out << ',' << t.n << ',' << t.invalid_rate << '\n';
        }
    }
    if (!out) throw train::IoError("write failed: " + path);
}

void emit_ablation_csv(const AblationReport& report, const std::string& path) {
    if (report.tables.empty()) throw EmptyReport("emit_ablation_csv: no variants");
    auto out = open_out(path);
    out << "variant,horizon,top1,delta_top1_vs_full\n";
    out << std::setprecision(10);
    const auto& full = report.tables.front();
    for (std::size_t v = 0; v < report.tables.size(); ++v) {
        const auto& t = report.tables[v];
        for (int step = 0; step < t.horizon; ++step) {
            out << report.names[v] << ',' << (step + 1) << ',' << t.topk[step][0] << ','
                << (t.topk[step][0] - full.topk[step][0]) << '\n';
        }
    }
    if (!out) throw train::IoError("write failed: " + path);
}

void emit_svg(const std::vector<MetricsTable>& tables, const std::string& path, int k) {
    if (tables.empty()) throw EmptyReport("emit_svg: no tables");
    int kidx = -1;
    for (std::size_t i = 0; i < kReportKs.size(); ++i)
        if (kReportKs[i] == k) kidx = static_cast<int>(i);
    if (kidx < 0) throw EmptyReport("emit_svg: k must be one of 1, 2, 3, 5");

    const int W = 800, H = 500;
    const double x0 = 70, x1 = 620, y0 = 440, y1 = 40;
    const int horizon = tables.front().horizon;
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b"};

    auto px = [&](int step) {
        return horizon > 1 ? x0 + (x1 - x0) * step / (horizon - 1) : (x0 + x1) / 2;
    };
    auto py = [&](double acc) { return y0 + (y1 - y0) * acc; };

    std::ostringstream s;
    s << std::setprecision(6);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << ' ' << H
      << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
    s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    for (int i = 0; i <= 10; ++i) {
        const double acc = i / 10.0;
        s << "<line x1=\"" << x0 << "\" y1=\"" << py(acc) << "\" x2=\"" << x1 << "\" y2=\""
          << py(acc) << "\" stroke=\"#dddddd\"/>\n";
        s << "<text x=\"" << x0 - 10 << "\" y=\"" << py(acc) + 4
          << "\" text-anchor=\"end\">" << std::fixed << std::setprecision(1) << acc
          << std::defaultfloat << std::setprecision(6) << "</text>\n";
    }
    for (int step = 0; step < horizon; ++step) {
        s << "<text x=\"" << px(step) << "\" y=\"" << y0 + 20
          << "\" text-anchor=\"middle\">t+" << (step + 1) << "</text>\n";
    }
    s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << y0 + 45
      << "\" text-anchor=\"middle\">prediction horizon</text>\n";
    s << "<text x=\"18\" y=\"" << (y0 + y1) / 2 << "\" transform=\"rotate(-90 18 "
      << (y0 + y1) / 2 << ")\" text-anchor=\"middle\">Top-" << k << " accuracy</text>\n";

    for (std::size_t t = 0; t < tables.size(); ++t) {
        const char* color = kColors[t % 6];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (int step = 0; step < tables[t].horizon; ++step)
            s << px(step) << ',' << py(tables[t].topk[step][kidx]) << ' ';
        s << "\"/>\n";
        for (int step = 0; step < tables[t].horizon; ++step)
            s << "<circle cx=\"" << px(step) << "\" cy=\"" << py(tables[t].topk[step][kidx])
              << "\" r=\"4\" fill=\"" << color << "\"/>\n";
        const double ly = y1 + 20.0 * static_cast<double>(t);
        s << "<line x1=\"640\" y1=\"" << ly << "\" x2=\"670\" y2=\"" << ly << "\" stroke=\""
          << color << "\" stroke-width=\"2\"/>\n";
        s << "<text x=\"676\" y=\"" << ly + 4 << "\">" << tables[t].predictor << "</text>\n";
    }
    s << "</svg>\n";

    auto out = open_out(path);
    out << s.str();
    if (!out) throw train::IoError("write failed: " + path);
}

std::vector<MetricsTable> parse_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw train::IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "predictor,horizon,top1,top2,top3,top5,n,invalid_rate")
        throw train::CorruptionError("parse_csv: bad header in " + path);
    std::vector<MetricsTable> tables;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 8) throw train::CorruptionError("parse_csv: bad row: " + line);
        if (tables.empty() || tables.back().predictor != fields[0]) {
            tables.push_back({});
            tables.back().predictor = fields[0];
        }
        auto& t = tables.back();
        t.horizon = std::stoi(fields[1]);
        std::array<double, 4> row{};
        for (int i = 0; i < 4; ++i) row[i] = std::stod(fields[2 + i]);
        t.topk.push_back(row);
        t.n = std::stol(fields[6]);
        t.invalid_rate = std::stod(fields[7]);
    }
    return tables;
}

}  // namespace beamvlm::eval
