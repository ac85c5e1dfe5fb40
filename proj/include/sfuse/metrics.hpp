#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/volume.hpp"

namespace sfuse {

// 2|P∩T| / (|P|+|T|) for one class; empty-vs-empty is 1.0 by convention,
// empty-vs-nonempty is 0.0.
inline double dice(const std::vector<int>& pred, const std::vector<int>& truth, int cls) {
    if (pred.size() != truth.size())
        throw DimensionError("dice: grids differ in size (" + std::to_string(pred.size()) + " vs " +
                             std::to_string(truth.size()) + ")");
    std::int64_t np = 0, nt = 0, inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == cls;
        const bool t = truth[i] == cls;
        np += p;
        nt += t;
        inter += (p && t);
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

struct DiceReport {
    std::string case_id;
    std::map<int, double> per_class;          // classes 1..L
    std::map<int, std::int64_t> pred_voxels;  // per class
    std::map<int, std::int64_t> truth_voxels;
    double mean = 1.0;  // arithmetic mean over present classes
};

inline DiceReport dice_report(const std::string& case_id, const std::vector<int>& pred,
                              const std::vector<int>& truth, int n_classes) {
    DiceReport rep;
    rep.case_id = case_id;
    double sum = 0;
    int present = 0;
    for (int c = 1; c <= n_classes; ++c) {
        std::int64_t np = 0, nt = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            np += pred[i] == c;
            nt += truth[i] == c;
        }
        rep.per_class[c] = dice(pred, truth, c);
        rep.pred_voxels[c] = np;
        rep.truth_voxels[c] = nt;
        if (np + nt > 0) {
            sum += rep.per_class[c];
            ++present;
        }
    }
    rep.mean = present > 0 ? sum / present : 1.0;
    return rep;
}

inline std::string format_sig6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct OodRow {
    std::string ft_region;
    std::string test_region;
    std::string variant;
    double mean_dice = 0;
    double delta = 0;  // variant - baseline, exactly
};

// Deterministic lexicographic row order, 6 significant digits.
inline void emit_ood_report(std::vector<OodRow> rows, const std::string& path) {
    std::sort(rows.begin(), rows.end(), [](const OodRow& a, const OodRow& b) {
        return std::tie(a.ft_region, a.test_region, a.variant) <
               std::tie(b.ft_region, b.test_region, b.variant);
    });
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing", 0);
    out << "ft_region,test_region,variant,mean_dice,delta\n";
    for (const auto& r : rows)
        out << r.ft_region << ',' << r.test_region << ',' << r.variant << ','
            << format_sig6(r.mean_dice) << ',' << format_sig6(r.delta) << '\n';
    if (!out) throw FormatError("short write to '" + path + "'", 0);
}

inline void emit_dice_report(const std::vector<DiceReport>& reports, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing", 0);
    out << "case,class,dice,pred_voxels,truth_voxels\n";
    for (const auto& rep : reports) {
        for (const auto& [cls, d] : rep.per_class)
            out << rep.case_id << ',' << cls << ',' << format_sig6(d) << ','
                << rep.pred_voxels.at(cls) << ',' << rep.truth_voxels.at(cls) << '\n';
        out << rep.case_id << ",mean," << format_sig6(rep.mean) << ",,\n";
    }
}

}  // namespace sfuse
