#include "m2m/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace m2m {

namespace {

constexpr int kW = 640, kH = 480, kPad = 60;

double map_log(double v, double lo, double hi, double out_lo, double out_hi) {
    const double t = (std::log10(v) - std::log10(lo)) / (std::log10(hi) - std::log10(lo));
    return out_lo + t * (out_hi - out_lo);
}

}  // namespace

std::string pareto_svg(const ParetoReport& report) {
    double ms_lo = 1e300, ms_hi = 0, l2_lo = 1e300, l2_hi = 0;
    for (const BenchRecord& r : report.records) {
        ms_lo = std::min(ms_lo, r.forward_ms);
        ms_hi = std::max(ms_hi, r.forward_ms);
        l2_lo = std::min(l2_lo, r.rel_l2);
        l2_hi = std::max(l2_hi, r.rel_l2);
    }
    ms_lo = std::max(ms_lo * 0.8, 1e-6);
    ms_hi = std::max(ms_hi * 1.2, ms_lo * 1.1);
    l2_lo = std::max(l2_lo * 0.8, 1e-12);
    l2_hi = std::max(l2_hi * 1.2, l2_lo * 1.1);

    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kW << "' height='" << kH << "'>\n"
       << "<rect width='100%' height='100%' fill='white'/>\n"
       << "<text x='" << kW / 2 << "' y='20' text-anchor='middle' font-size='14'>"
       << "accuracy vs compute</text>\n"
       << "<text x='" << kW / 2 << "' y='" << kH - 8
       << "' text-anchor='middle' font-size='12'>forward time (ms, log)</text>\n"
       << "<text x='14' y='" << kH / 2
       << "' text-anchor='middle' font-size='12' transform='rotate(-90 14 " << kH / 2
       << ")'>relative L2 (log)</text>\n"
       << "<rect x='" << kPad << "' y='" << kPad << "' width='" << kW - 2 * kPad << "' height='"
       << kH - 2 * kPad << "' fill='none' stroke='#999'/>\n";

    // Frontier polyline over efficient points sorted by time.
    std::vector<const BenchRecord*> front;
    for (const BenchRecord& r : report.records)
        if (r.pareto_efficient) front.push_back(&r);
    std::sort(front.begin(), front.end(),
              [](const BenchRecord* a, const BenchRecord* b) { return a->forward_ms < b->forward_ms; });
    if (front.size() > 1) {
        os << "<polyline fill='none' stroke='#4477cc' stroke-width='1.5' points='";
        for (const BenchRecord* r : front)
            os << map_log(r->forward_ms, ms_lo, ms_hi, kPad, kW - kPad) << ','
               << map_log(r->rel_l2, l2_lo, l2_hi, kH - kPad, kPad) << ' ';
        os << "'/>\n";
    }
    for (const BenchRecord& r : report.records) {
        const double x = map_log(r.forward_ms, ms_lo, ms_hi, kPad, kW - kPad);
        const double y = map_log(r.rel_l2, l2_lo, l2_hi, kH - kPad, kPad);
        os << "<circle cx='" << x << "' cy='" << y << "' r='" << (r.pareto_efficient ? 6 : 4)
           << "' fill='" << (r.pareto_efficient ? "#4477cc" : "#cc7744") << "'/>\n"
           << "<text x='" << x + 8 << "' y='" << y + 4 << "' font-size='10'>" << r.model_name
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string router_heatmap_svg(const Tensor& probs, const std::string& title) {
    const int64_t p = probs.dim(0), m = probs.dim(1);
    const int cell = 28, top = 40, left = 80;
    const int w = left + static_cast<int>(m) * cell + 20;
    const int h = top + static_cast<int>(p) * cell + 20;
    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n"
       << "<rect width='100%' height='100%' fill='white'/>\n"
       << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='13'>" << title
       << "</text>\n";
    for (int64_t i = 0; i < p; ++i) {
        os << "<text x='" << left - 8 << "' y='" << top + i * cell + cell / 2 + 4
           << "' text-anchor='end' font-size='10'>patch " << i << "</text>\n";
        for (int64_t j = 0; j < m; ++j) {
            const double v = std::clamp(probs.at(i, j), 0.0, 1.0);
            const int shade = static_cast<int>(255.0 * (1.0 - v));
            os << "<rect x='" << left + j * cell << "' y='" << top + i * cell << "' width='"
               << cell - 2 << "' height='" << cell - 2 << "' fill='rgb(" << shade << ','
               << shade << ",255)'/>\n";
        }
    }
    for (int64_t j = 0; j < m; ++j)
        os << "<text x='" << left + j * cell + cell / 2 << "' y='" << top - 6
           << "' text-anchor='middle' font-size='10'>E" << j << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

}  // namespace m2m
