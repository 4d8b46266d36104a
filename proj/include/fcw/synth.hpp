#pragma once
// Synthetic CAN traffic with known ("planted") signal layouts. Each ID emits
// frames at a fixed period (optional jitter) whose payload is driven per
// signal: constants, counters that increment every frame, bounded random
// walks for physical values, and an 8-bit additive checksum over the other
// payload bytes.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fcw/can.hpp"
#include "fcw/segmentation.hpp"

namespace fcw {

struct SignalDynamics {
    SignalClass cls = SignalClass::Constant;
    uint16_t start_bit = 0;
    uint16_t length = 0;
    uint64_t init = 0;        // starting raw value (ignored for CHECKSUM)
    int64_t walk_step = 0;    // PHYSICAL: max |step| per frame
};

struct SynthIdSpec {
    uint16_t id = 0;
    uint8_t dlc = 8;
    double period_s = 0.01;
    double jitter_frac = 0.0;  // uniform +/- fraction of the period
    std::vector<SignalDynamics> signals;
};

inline SignalLayout planted_layout(const SynthIdSpec& spec) {
    SignalLayout l;
    l.id = spec.id;
    l.width_bits = static_cast<uint16_t>(spec.dlc * 8);
    for (const auto& d : spec.signals)
        l.signals.push_back(Signal{d.start_bit, d.length, d.cls});
    std::sort(l.signals.begin(), l.signals.end(),
              [](const Signal& a, const Signal& b) { return a.start_bit < b.start_bit; });
    return l;
}

namespace detail {

inline void validate_synth_spec(const SynthIdSpec& spec) {
    if (spec.dlc > 8) throw OutOfRange("synth: dlc > 8 for id " + std::to_string(spec.id));
    if (spec.period_s <= 0) throw OutOfRange("synth: period must be positive");
    const size_t W = static_cast<size_t>(spec.dlc) * 8;
    std::vector<int> cover(W, 0);
    for (const auto& d : spec.signals) {
        if (d.length == 0 || d.start_bit + d.length > W)
            throw OutOfRange("synth: signal span outside payload for id " +
                             std::to_string(spec.id));
        if (d.cls == SignalClass::Checksum && (d.length != 8 || d.start_bit % 8 != 0))
            throw OutOfRange("synth: checksum must be one aligned byte");
        for (size_t i = d.start_bit; i < static_cast<size_t>(d.start_bit) + d.length; ++i) {
            if (cover[i]++) throw OutOfRange("synth: overlapping signals");
        }
    }
    for (size_t i = 0; i < W; ++i)
        if (!cover[i]) throw OutOfRange("synth: bit " + std::to_string(i) + " uncovered");
}

}  // namespace detail

// Generates one ID's frames for [0, duration_s). Deterministic in (spec, seed).
inline std::vector<CanFrame> synthesize_id(const SynthIdSpec& spec, double duration_s,
                                           uint64_t seed) {
    detail::validate_synth_spec(spec);
    Rng rng(Rng::mix(seed, spec.id));

    std::vector<uint64_t> value(spec.signals.size());
    for (size_t k = 0; k < spec.signals.size(); ++k) {
        const auto& d = spec.signals[k];
        uint64_t maxv = signal_max_value(Signal{d.start_bit, d.length, d.cls});
        value[k] = std::min(d.init, maxv);
    }

    const int64_t period_us = std::llround(spec.period_s * 1e6);
    const int64_t duration_us = std::llround(duration_s * 1e6);
    std::vector<CanFrame> out;
    int64_t t_us = 0;
    bool first = true;
    while (t_us < duration_us) {
        CanFrame f;
        f.timestamp = static_cast<double>(t_us) / 1e6;
        f.id = spec.id;
        f.dlc = spec.dlc;

        // advance non-checksum signals (initial values emitted as-is)
        if (!first) {
            for (size_t k = 0; k < spec.signals.size(); ++k) {
                const auto& d = spec.signals[k];
                const uint64_t maxv = signal_max_value(Signal{d.start_bit, d.length, d.cls});
                switch (d.cls) {
                    case SignalClass::Counter:
                        value[k] = (value[k] + 1) & maxv;
                        break;
                    case SignalClass::Physical: {
                        int64_t step = rng.int_in(-d.walk_step, d.walk_step);
                        int64_t v = static_cast<int64_t>(value[k]) + step;
                        if (v < 0) v = 0;
                        if (v > static_cast<int64_t>(maxv)) v = static_cast<int64_t>(maxv);
                        value[k] = static_cast<uint64_t>(v);
                        break;
                    }
                    default:
                        break;
                }
            }
        }
        first = false;

        for (size_t k = 0; k < spec.signals.size(); ++k) {
            const auto& d = spec.signals[k];
            if (d.cls == SignalClass::Checksum) continue;
            encode_signal(f.payload, Signal{d.start_bit, d.length, d.cls}, value[k]);
        }
        // checksum last: byte-sum of all other payload bytes, mod 256
        for (const auto& d : spec.signals) {
            if (d.cls != SignalClass::Checksum) continue;
            const size_t cs_byte = d.start_bit / 8;
            unsigned sum = 0;
            for (size_t b = 0; b < spec.dlc; ++b)
                if (b != cs_byte) sum += f.payload[b];
            f.payload[cs_byte] = static_cast<uint8_t>(sum & 0xFF);
        }
        out.push_back(f);

        int64_t gap = period_us;
        if (spec.jitter_frac > 0) {
            double u = rng.uniform(-1.0, 1.0);
            gap += std::llround(static_cast<double>(period_us) * spec.jitter_frac * u);
            if (gap < 1) gap = 1;
        }
        t_us += gap;
    }
    return out;
}

// Generates and merges several IDs into one time-ordered trace.
inline std::vector<CanFrame> synthesize_traffic(const std::vector<SynthIdSpec>& specs,
                                                double duration_s, uint64_t seed) {
    std::vector<CanFrame> all;
    for (const auto& spec : specs) {
        auto part = synthesize_id(spec, duration_s, seed);
        all.insert(all.end(), part.begin(), part.end());
    }
    std::stable_sort(all.begin(), all.end(), [](const CanFrame& a, const CanFrame& b) {
        if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
        return a.id < b.id;
    });
    return all;
}

}  // namespace fcw
