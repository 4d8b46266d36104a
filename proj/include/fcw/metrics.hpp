#pragma once
// Evaluation metrics: detection quality (window- and instance-level) and
// communication overhead of the federated training process.

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fcw/can.hpp"

namespace fcw {

// ---------------------------------------------------------------------------
// Detection report
// ---------------------------------------------------------------------------

// Outcome of classifying one window against its ground truth.
struct WindowVerdict {
    uint16_t id = 0;
    AttackKind truth = AttackKind::None;
    uint64_t instance = 0;  // meaningful when truth != None
    bool flagged = false;
};

struct ConfusionCounts {
    uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    uint64_t attack_windows() const { return tp + fn; }
    uint64_t clean_windows() const { return fp + tn; }
    uint64_t total() const { return tp + fp + tn + fn; }

    // share of attack windows flagged; absent when there were none
    std::optional<double> detection_rate() const {
        if (tp + fn == 0) return std::nullopt;
        return static_cast<double>(tp) / static_cast<double>(tp + fn);
    }
    // share of clean windows flagged; absent when there were none
    std::optional<double> false_positive_rate() const {
        if (fp + tn == 0) return std::nullopt;
        return static_cast<double>(fp) / static_cast<double>(fp + tn);
    }

    void add(bool attack, bool flagged) {
        if (attack)
            flagged ? ++tp : ++fn;
        else
            flagged ? ++fp : ++tn;
    }
};

struct DetectionBreakdown {
    ConfusionCounts windows;
    // an attack instance counts as detected when at least one of its windows
    // was flagged
    uint64_t instances_total = 0;
    uint64_t instances_detected = 0;

    std::optional<double> instance_detection_rate() const {
        if (instances_total == 0) return std::nullopt;
        return static_cast<double>(instances_detected) / static_cast<double>(instances_total);
    }
};

struct DetectionReport {
    DetectionBreakdown overall;
    std::map<AttackKind, DetectionBreakdown> by_kind;
    std::map<uint16_t, DetectionBreakdown> by_id;
};

inline DetectionReport build_detection_report(const std::vector<WindowVerdict>& verdicts) {
    DetectionReport rep;
    // instance key: (id, kind, instance); value: any window flagged
    std::map<std::tuple<uint16_t, AttackKind, uint64_t>, bool> instances;

    for (const auto& v : verdicts) {
        const bool attack = v.truth != AttackKind::None;
        rep.overall.windows.add(attack, v.flagged);
        rep.by_id[v.id].windows.add(attack, v.flagged);
        if (attack) {
            rep.by_kind[v.truth].windows.add(true, v.flagged);
            auto& hit = instances[{v.id, v.truth, v.instance}];
            hit = hit || v.flagged;
        }
    }
    for (const auto& [key, hit] : instances) {
        const auto& [id, kind, inst] = key;
        ++rep.overall.instances_total;
        ++rep.by_kind[kind].instances_total;
        ++rep.by_id[id].instances_total;
        if (hit) {
            ++rep.overall.instances_detected;
            ++rep.by_kind[kind].instances_detected;
            ++rep.by_id[id].instances_detected;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Communication overhead
// ---------------------------------------------------------------------------

inline constexpr double kMiB = 1048576.0;

struct OverheadParams {
    uint64_t model_update_bytes = 372893;  // serialized model update size S
    double subscriber_latency_s = 0.180;   // one delivery exchange at a vehicle
    double publisher_latency_s = 0.411;    // one publish exchange at a vehicle
    double raw_frame_bytes = 102.0;        // upload cost per raw frame, baseline
};

// Per-vehicle cost of one federated training run that ran R rounds.
struct OverheadRow {
    uint32_t rounds = 0;
    uint64_t raw_packets = 0;  // local training packets (baseline upload)
    double dl_time_s = 0.0;    // R global-update deliveries
    double ul_time_s = 0.0;    // R local-update publishes
    double dl_bytes = 0.0;     // (R + 1) model downloads: R rounds + final model
    double ul_bytes = 0.0;     // R model uploads
    double delta_bytes = 0.0;  // (DL + UL) - (raw upload + one model download)

    double dl_mib() const { return dl_bytes / kMiB; }
    double ul_mib() const { return ul_bytes / kMiB; }
    double delta_mib() const { return delta_bytes / kMiB; }
};

inline OverheadRow overhead_row(uint32_t rounds, uint64_t raw_packets,
                                const OverheadParams& p = {}) {
    OverheadRow r;
    r.rounds = rounds;
    r.raw_packets = raw_packets;
    const double s = static_cast<double>(p.model_update_bytes);
    r.dl_time_s = rounds * p.subscriber_latency_s;
    r.ul_time_s = rounds * p.publisher_latency_s;
    r.dl_bytes = (rounds + 1.0) * s;
    r.ul_bytes = rounds * s;
    const double baseline = static_cast<double>(raw_packets) * p.raw_frame_bytes + s;
    r.delta_bytes = (r.dl_bytes + r.ul_bytes) - baseline;
    return r;
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

inline std::string opt_rate(const std::optional<double>& v) {
    return v ? fmt("%.4f", *v) : std::string("-");
}

}  // namespace detail

inline std::string format_detection_report(const DetectionReport& rep) {
    std::ostringstream os;
    auto line = [&](const std::string& scope, const DetectionBreakdown& b) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-20s %8llu %8llu %8s %8s %5llu/%-5llu %8s\n",
                      scope.c_str(),
                      static_cast<unsigned long long>(b.windows.attack_windows()),
                      static_cast<unsigned long long>(b.windows.clean_windows()),
                      detail::opt_rate(b.windows.detection_rate()).c_str(),
                      detail::opt_rate(b.windows.false_positive_rate()).c_str(),
                      static_cast<unsigned long long>(b.instances_detected),
                      static_cast<unsigned long long>(b.instances_total),
                      detail::opt_rate(b.instance_detection_rate()).c_str());
        os << buf;
    };
    os << "scope                 atk-win  cln-win       DR      FPR   instances  inst-DR\n";
    line("overall", rep.overall);
    for (const auto& [kind, b] : rep.by_kind) line(std::string(attack_kind_name(kind)), b);
    for (const auto& [id, b] : rep.by_id) {
        char name[16];
        std::snprintf(name, sizeof(name), "id %03X", id);
        line(name, b);
    }
    return os.str();
}

inline std::string detection_csv(const DetectionReport& rep) {
    std::ostringstream os;
    os << "scope,key,attack_windows,clean_windows,tp,fp,tn,fn,dr,fpr,"
          "instances,instances_detected,instance_dr\n";
    auto row = [&](const std::string& scope, const std::string& key,
                   const DetectionBreakdown& b) {
        os << scope << ',' << key << ',' << b.windows.attack_windows() << ','
           << b.windows.clean_windows() << ',' << b.windows.tp << ',' << b.windows.fp << ','
           << b.windows.tn << ',' << b.windows.fn << ','
           << detail::opt_rate(b.windows.detection_rate()) << ','
           << detail::opt_rate(b.windows.false_positive_rate()) << ',' << b.instances_total
           << ',' << b.instances_detected << ','
           << detail::opt_rate(b.instance_detection_rate()) << '\n';
    };
    row("overall", "", rep.overall);
    for (const auto& [kind, b] : rep.by_kind) row("kind", attack_kind_name(kind), b);
    for (const auto& [id, b] : rep.by_id) {
        char key[16];
        std::snprintf(key, sizeof(key), "%03X", id);
        row("id", key, b);
    }
    return os.str();
}

inline std::string format_overhead_table(
    const std::vector<std::pair<std::string, OverheadRow>>& rows) {
    std::ostringstream os;
    os << "id      R   DL time  UL time  DL MiB   UL MiB   delta MiB\n";
    for (const auto& [label, r] : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-6s %4u %8.2f %8.2f %8.2f %8.2f %+10.2f\n",
                      label.c_str(), r.rounds, r.dl_time_s, r.ul_time_s, r.dl_mib(), r.ul_mib(),
                      r.delta_mib());
        os << buf;
    }
    return os.str();
}

inline std::string overhead_csv(const std::vector<std::pair<std::string, OverheadRow>>& rows) {
    std::ostringstream os;
    os << "id,rounds,raw_packets,dl_time_s,ul_time_s,dl_bytes,ul_bytes,dl_mib,ul_mib,"
          "delta_mib\n";
    for (const auto& [label, r] : rows) {
        char buf[240];
        std::snprintf(buf, sizeof(buf), "%s,%u,%llu,%.6f,%.6f,%.0f,%.0f,%.6f,%.6f,%.6f\n",
                      label.c_str(), r.rounds, static_cast<unsigned long long>(r.raw_packets),
                      r.dl_time_s, r.ul_time_s, r.dl_bytes, r.ul_bytes, r.dl_mib(), r.ul_mib(),
                      r.delta_mib());
        os << buf;
    }
    return os.str();
}

}  // namespace fcw
