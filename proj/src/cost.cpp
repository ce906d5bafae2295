#include "nodnet/cost.hpp"

#include <cinttypes>
#include <cstdio>

namespace nodnet {

namespace {

long long shape_elems(const Shape& s) { return shape_numel(s); }

std::string shape_hxw(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out.empty() ? "scalar" : out;
}

std::string with_commas(long long v) {
    std::string digits = std::to_string(v);
    std::string out;
    int count = 0;
    for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
        if (count && count % 3 == 0) out += ',';
        out += *it;
        ++count;
    }
    return {out.rbegin(), out.rend()};
}

}  // namespace

CostReport analyze_cost(const NetworkSpec& spec, bool macs_only) {
    const std::vector<Shape> shapes = infer_shapes(spec);
    CostReport report;
    report.network = spec.name;
    report.input_shape = spec.input_shape;
    report.macs_only = macs_only;

    Shape in_shape = spec.input_shape;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        CostRow row;
        row.name = spec.layers[i].name;
        row.out_shape = shapes[i];
        const long long out_elems = shape_elems(shapes[i]);
        std::visit(
            [&](const auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, Conv2dSpec>) {
                    const long long k2 = static_cast<long long>(layer.kernel) * layer.kernel;
                    row.params = static_cast<long long>(layer.in_ch) * layer.out_ch * k2 + layer.out_ch;
                    row.macs = static_cast<long long>(shapes[i][1]) * shapes[i][2] * layer.out_ch * layer.in_ch * k2;
                    row.flops = macs_only ? row.macs : 2 * row.macs;
                } else if constexpr (std::is_same_v<L, LinearSpec>) {
                    row.params = static_cast<long long>(layer.in_features) * layer.out_features + layer.out_features;
                    row.macs = static_cast<long long>(layer.in_features) * layer.out_features;
                    row.flops = macs_only ? row.macs : 2 * row.macs;
                } else if constexpr (std::is_same_v<L, BatchNorm2dSpec>) {
                    row.params = 2LL * layer.ch;  // gamma and beta; running stats are not trainable
                    row.flops = out_elems;
                } else if constexpr (std::is_same_v<L, ReLUSpec> || std::is_same_v<L, SigmoidSpec> ||
                                     std::is_same_v<L, SoftmaxSpec> || std::is_same_v<L, MaxPool2x2Spec>) {
                    row.flops = out_elems;
                }
                // unpool / concat / flatten / repeat: data movement, 0 FLOPs
            },
            spec.layers[i].spec);
        report.total_params += row.params;
        report.total_macs += row.macs;
        report.total_flops += row.flops;
        report.rows.push_back(std::move(row));
        in_shape = shapes[i];
    }
    return report;
}

long long count_params(const NetworkSpec& spec) { return analyze_cost(spec).total_params; }

std::string render_cost_table(const CostReport& r) {
    std::string out;
    out += "network: " + r.network + "   input: " + shape_hxw(r.input_shape) + " (batch 1)\n";
    out += r.macs_only ? "convention: FLOPs column reports MACs (--macs-only); "
                       : "convention: FLOPs = 2*MACs for conv/linear; ";
    out += "pool/activation/norm 1 FLOP per output element; data movement 0\n";
    out += "batch-norm running statistics excluded from trainable parameters\n\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-18s %16s %18s %18s  %s\n", "layer", "params", "MACs", "FLOPs", "output");
    out += line;
    out += std::string(86, '-') + "\n";
    for (const auto& row : r.rows) {
        std::snprintf(line, sizeof(line), "%-18s %16s %18s %18s  %s\n", row.name.c_str(),
                      with_commas(row.params).c_str(), with_commas(row.macs).c_str(), with_commas(row.flops).c_str(),
                      shape_hxw(row.out_shape).c_str());
        out += line;
    }
    out += std::string(86, '-') + "\n";
    std::snprintf(line, sizeof(line), "%-18s %16s %18s %18s\n", "TOTAL", with_commas(r.total_params).c_str(),
                  with_commas(r.total_macs).c_str(), with_commas(r.total_flops).c_str());
    out += line;
    return out;
}

std::string render_cost_csv(const CostReport& r) {
    std::string out = "layer,params,macs,flops,out_shape\n";
    for (const auto& row : r.rows)
        out += row.name + "," + std::to_string(row.params) + "," + std::to_string(row.macs) + "," +
               std::to_string(row.flops) + "," + shape_hxw(row.out_shape) + "\n";
    out += "TOTAL," + std::to_string(r.total_params) + "," + std::to_string(r.total_macs) + "," +
           std::to_string(r.total_flops) + ",\n";
    return out;
}

}  // namespace nodnet
