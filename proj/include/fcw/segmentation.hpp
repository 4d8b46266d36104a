#pragma once
// Payload reverse-engineering: per-bit flip-rate profiles over an ID's
// frames, and recovery of a signal layout (CONSTANT / COUNTER / CHECKSUM /
// PHYSICAL fields) from those profiles.
//
// Bit numbering is MSB-first: bit 0 is the most significant bit of payload
// byte 0, bit 63 the least significant bit of byte 7.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fcw/can.hpp"

namespace fcw {

struct TooFewFrames : std::runtime_error {
    explicit TooFewFrames(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Layout types
// ---------------------------------------------------------------------------

enum class SignalClass : uint8_t { Constant = 0, Counter, Checksum, Physical };

inline const char* signal_class_name(SignalClass c) {
    switch (c) {
        case SignalClass::Constant: return "CONSTANT";
        case SignalClass::Counter: return "COUNTER";
        case SignalClass::Checksum: return "CHECKSUM";
        case SignalClass::Physical: return "PHYSICAL";
    }
    return "?";
}

inline bool signal_class_from_name(std::string s, SignalClass& out) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
    for (SignalClass c : {SignalClass::Constant, SignalClass::Counter, SignalClass::Checksum,
                          SignalClass::Physical}) {
        if (s == signal_class_name(c)) {
            out = c;
            return true;
        }
    }
    return false;
}

struct Signal {
    uint16_t start_bit = 0;  // MSB-first global bit index
    uint16_t length = 0;     // in bits, >= 1
    SignalClass cls = SignalClass::Constant;

    bool operator==(const Signal& o) const {
        return start_bit == o.start_bit && length == o.length && cls == o.cls;
    }
};

struct SignalLayout {
    uint16_t id = 0;
    uint16_t width_bits = 0;      // dlc * 8 of the profiled stream
    std::vector<Signal> signals;  // sorted by start_bit, non-overlapping

    bool operator==(const SignalLayout& o) const {
        return id == o.id && width_bits == o.width_bits && signals == o.signals;
    }
};

// ---------------------------------------------------------------------------
// Bit access within a payload (MSB-first numbering)
// ---------------------------------------------------------------------------

inline int payload_bit(const std::array<uint8_t, 8>& payload, size_t bit) {
    return (payload[bit / 8] >> (7 - bit % 8)) & 1;
}

inline void set_payload_bit(std::array<uint8_t, 8>& payload, size_t bit, int value) {
    uint8_t mask = static_cast<uint8_t>(1u << (7 - bit % 8));
    if (value)
        payload[bit / 8] |= mask;
    else
        payload[bit / 8] &= static_cast<uint8_t>(~mask);
}

// Reads a signal's raw unsigned value (big-endian across its bit span).
inline uint64_t decode_signal(const std::array<uint8_t, 8>& payload, const Signal& sig) {
    uint64_t v = 0;
    for (uint16_t j = 0; j < sig.length; ++j)
        v = (v << 1) | static_cast<uint64_t>(payload_bit(payload, sig.start_bit + j));
    return v;
}

inline void encode_signal(std::array<uint8_t, 8>& payload, const Signal& sig, uint64_t value) {
    for (uint16_t j = 0; j < sig.length; ++j) {
        int bit = static_cast<int>((value >> (sig.length - 1 - j)) & 1u);
        set_payload_bit(payload, sig.start_bit + j, bit);
    }
}

inline uint64_t signal_max_value(const Signal& sig) {
    return sig.length >= 64 ? ~0ULL : ((1ULL << sig.length) - 1);
}

// ---------------------------------------------------------------------------
// Bit flip profile
// ---------------------------------------------------------------------------

struct BitFlipProfile {
    uint16_t id = 0;
    uint16_t width_bits = 0;
    size_t frame_count = 0;
    std::array<double, 64> rate{};  // flips / (frame_count - 1), index MSB-first
};

// Counts, for every payload bit position, how often the bit differs between
// consecutive frames. Requires at least two frames.
inline BitFlipProfile bit_flip_profile(const IdStream& s) {
    if (s.frames.size() < 2)
        throw TooFewFrames("bit_flip_profile: stream of id " + std::to_string(s.id) + " has " +
                           std::to_string(s.frames.size()) + " frames, need >= 2");
    BitFlipProfile p;
    p.id = s.id;
    p.width_bits = static_cast<uint16_t>(s.frames.front().dlc * 8);
    p.frame_count = s.frames.size();
    std::array<uint64_t, 64> flips{};
    for (size_t i = 1; i < s.frames.size(); ++i) {
        const auto& a = s.frames[i - 1].payload;
        const auto& b = s.frames[i].payload;
        for (size_t byte = 0; byte < 8; ++byte) {
            uint8_t x = a[byte] ^ b[byte];
            while (x) {
                int lsb = __builtin_ctz(x);
                flips[byte * 8 + (7 - static_cast<size_t>(lsb))]++;
                x = static_cast<uint8_t>(x & (x - 1));
            }
        }
    }
    const double pairs = static_cast<double>(s.frames.size() - 1);
    for (size_t i = 0; i < 64; ++i) p.rate[i] = static_cast<double>(flips[i]) / pairs;
    return p;
}

// ---------------------------------------------------------------------------
// Layout recovery
// ---------------------------------------------------------------------------

struct LayoutThresholds {
    // Checksum test: every bit of the trailing byte flips in this band.
    double checksum_lo = 0.4;
    double checksum_hi = 0.6;
    // Counter test: adjacent-bit rate ratio toward the MSB stays in this
    // band (geometric halving), over a chain of at least counter_min_bits.
    double counter_ratio_lo = 0.4;
    double counter_ratio_hi = 0.6;
    int counter_min_bits = 3;
    // A counter increments on (nearly) every frame, so its LSB flip rate is
    // ~1.0; random-walk signals also show halving chains but their LSB sits
    // near 0.5, and this floor keeps them out.
    double counter_lsb_min = 0.9;
};

// Recovers a layout from a flip profile:
//   1. trailing byte with all rates in the checksum band -> CHECKSUM
//   2. halving chains ending in a ~always-flipping LSB    -> COUNTER
//   3. zero-rate runs -> CONSTANT; remaining runs split into PHYSICAL fields
//      where the flip rate drops by an order of magnitude from one bit to
//      the next (scanning MSB to LSB), i.e. at the transition from one
//      field's fast LSB to the next field's slow MSB.
// The result always covers [0, width_bits) exactly.
inline SignalLayout derive_layout(const BitFlipProfile& p, const LayoutThresholds& th = {}) {
    const size_t W = p.width_bits;
    SignalLayout layout;
    layout.id = p.id;
    layout.width_bits = static_cast<uint16_t>(W);
    if (W == 0) return layout;

    enum Mark : uint8_t { Free, Csum, Ctr };
    std::vector<Mark> mark(W, Free);

    // 1. checksum: trailing byte, every bit in the band
    if (W >= 8) {
        bool all_in_band = true;
        for (size_t i = W - 8; i < W; ++i)
            if (p.rate[i] < th.checksum_lo || p.rate[i] > th.checksum_hi) {
                all_in_band = false;
                break;
            }
        if (all_in_band)
            for (size_t i = W - 8; i < W; ++i) mark[i] = Csum;
    }

    // 2. counters: start from a hot LSB and extend toward the MSB while the
    //    rate keeps halving
    std::vector<Signal> counters;
    for (size_t b = W; b-- > 0;) {
        if (mark[b] != Free || p.rate[b] < th.counter_lsb_min) continue;
        size_t a = b;
        while (a > 0 && mark[a - 1] == Free && p.rate[a] > 0.0) {
            double ratio = p.rate[a - 1] / p.rate[a];
            if (ratio < th.counter_ratio_lo || ratio > th.counter_ratio_hi) break;
            --a;
        }
        if (b - a + 1 >= static_cast<size_t>(th.counter_min_bits)) {
            for (size_t i = a; i <= b; ++i) mark[i] = Ctr;
            counters.push_back(Signal{static_cast<uint16_t>(a),
                                      static_cast<uint16_t>(b - a + 1), SignalClass::Counter});
            if (a == 0) break;
            b = a;  // resume scanning below the chain (loop decrements)
        }
    }

    // 3. fill: walk the free gaps; zero-rate runs are CONSTANT, positive runs
    //    are PHYSICAL fields split at order-of-magnitude rate drops
    auto magnitude = [](double r) {
        return static_cast<int>(std::ceil(-std::log10(std::max(r, 1e-12))));
    };
    std::vector<Signal> fills;
    size_t i = 0;
    while (i < W) {
        if (mark[i] != Free) {
            ++i;
            continue;
        }
        size_t gap_end = i;
        while (gap_end < W && mark[gap_end] == Free) ++gap_end;
        size_t j = i;
        while (j < gap_end) {
            size_t run = j;
            if (p.rate[j] == 0.0) {
                while (run < gap_end && p.rate[run] == 0.0) ++run;
                fills.push_back(Signal{static_cast<uint16_t>(j),
                                       static_cast<uint16_t>(run - j), SignalClass::Constant});
            } else {
                while (run + 1 < gap_end && p.rate[run + 1] > 0.0 &&
                       magnitude(p.rate[run + 1]) <= magnitude(p.rate[run]))
                    ++run;
                ++run;
                fills.push_back(Signal{static_cast<uint16_t>(j),
                                       static_cast<uint16_t>(run - j), SignalClass::Physical});
            }
            j = run;
        }
        i = gap_end;
    }

    // checksum signal, if marked
    if (W >= 8 && mark[W - 8] == Csum)
        layout.signals.push_back(
            Signal{static_cast<uint16_t>(W - 8), 8, SignalClass::Checksum});
    layout.signals.insert(layout.signals.end(), counters.begin(), counters.end());
    layout.signals.insert(layout.signals.end(), fills.begin(), fills.end());
    std::sort(layout.signals.begin(), layout.signals.end(),
              [](const Signal& a, const Signal& b) { return a.start_bit < b.start_bit; });
    return layout;
}

// ---------------------------------------------------------------------------
// Layout file I/O:  id_hex,start_bit,length,class  one signal per line
// ---------------------------------------------------------------------------

inline std::string serialize_layouts(const std::vector<SignalLayout>& layouts) {
    std::string out = "# id_hex,start_bit,length,class\n";
    for (const auto& l : layouts) {
        char idbuf[8];
        std::snprintf(idbuf, sizeof idbuf, "%03X", l.id);
        for (const auto& s : l.signals) {
            out += idbuf;
            out += ',' + std::to_string(s.start_bit) + ',' + std::to_string(s.length) + ',';
            out += signal_class_name(s.cls);
            out.push_back('\n');
        }
    }
    return out;
}

inline std::vector<SignalLayout> parse_layouts(const std::string& text) {
    std::map<uint16_t, SignalLayout> by_id;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> fields;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        detail::split_csv(t, fields);
        if (fields.size() != 4)
            throw MalformedLine("layout line " + std::to_string(lineno) + ": expected 4 fields");
        uint64_t id = 0;
        if (!parse_hex_u64(detail::trim(fields[0]), id) || id > 0x7FF)
            throw InvalidId("layout line " + std::to_string(lineno) + ": bad id");
        Signal s;
        try {
            s.start_bit = static_cast<uint16_t>(std::stoul(detail::trim(fields[1])));
            s.length = static_cast<uint16_t>(std::stoul(detail::trim(fields[2])));
        } catch (const std::exception&) {
            throw MalformedLine("layout line " + std::to_string(lineno) + ": bad bit span");
        }
        if (s.length == 0 || s.start_bit + s.length > 64)
            throw OutOfRange("layout line " + std::to_string(lineno) + ": span exceeds 64 bits");
        if (!signal_class_from_name(detail::trim(fields[3]), s.cls))
            throw MalformedLine("layout line " + std::to_string(lineno) + ": bad class '" +
                                fields[3] + "'");
        auto& l = by_id[static_cast<uint16_t>(id)];
        l.id = static_cast<uint16_t>(id);
        l.signals.push_back(s);
    }
    std::vector<SignalLayout> out;
    for (auto& [id, l] : by_id) {
        std::sort(l.signals.begin(), l.signals.end(),
                  [](const Signal& a, const Signal& b) { return a.start_bit < b.start_bit; });
        for (size_t k = 1; k < l.signals.size(); ++k)
            if (l.signals[k].start_bit < l.signals[k - 1].start_bit + l.signals[k - 1].length)
                throw OutOfRange("layout for id " + std::to_string(id) + ": overlapping signals");
        uint16_t extent = l.signals.empty()
                              ? 0
                              : static_cast<uint16_t>(l.signals.back().start_bit +
                                                      l.signals.back().length);
        l.width_bits = static_cast<uint16_t>((extent + 7) / 8 * 8);
        out.push_back(std::move(l));
    }
    return out;
}

inline const SignalLayout* find_layout(const std::vector<SignalLayout>& layouts, uint16_t id) {
    for (const auto& l : layouts)
        if (l.id == id) return &l;
    return nullptr;
}

}  // namespace fcw
