#pragma once
// CAN trace handling: frame model, text log parse/serialize, per-ID streams,
// sliding windows and contiguous per-vehicle partitioning.
//
// Log format, one frame per line:   timestamp,id_hex,dlc,payload_hex
// '#' starts a comment line; blank lines are ignored.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcw/util.hpp"

namespace fcw {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct MalformedLine : std::runtime_error {
    explicit MalformedLine(const std::string& what) : std::runtime_error(what) {}
};
struct InvalidId : std::runtime_error {
    explicit InvalidId(const std::string& what) : std::runtime_error(what) {}
};
struct DlcMismatch : std::runtime_error {
    explicit DlcMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct OutOfRange : std::runtime_error {
    explicit OutOfRange(const std::string& what) : std::runtime_error(what) {}
};
struct EmptyDataset : std::runtime_error {
    explicit EmptyDataset(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

struct CanFrame {
    double timestamp = 0.0;              // seconds, non-decreasing within a log
    uint16_t id = 0;                     // 11-bit identifier
    uint8_t dlc = 0;                     // payload byte count 0..8
    std::array<uint8_t, 8> payload{};    // bytes past dlc are zero

    bool operator==(const CanFrame& o) const {
        return timestamp == o.timestamp && id == o.id && dlc == o.dlc && payload == o.payload;
    }
};

// All frames of one CAN identifier, in original (time) order.
struct IdStream {
    uint16_t id = 0;
    std::vector<CanFrame> frames;
};

// Attack taxonomy shared with the attack and metrics modules.
enum class AttackKind : uint8_t {
    None = 0,
    InjectReplay,
    MasqueradeFuzz,
    MasqueradeReplay,
    MasqueradeSeamless,
    Drop,
};

inline const char* attack_kind_name(AttackKind k) {
    switch (k) {
        case AttackKind::None: return "none";
        case AttackKind::InjectReplay: return "inject_replay";
        case AttackKind::MasqueradeFuzz: return "masquerade_fuzz";
        case AttackKind::MasqueradeReplay: return "masquerade_replay";
        case AttackKind::MasqueradeSeamless: return "masquerade_seamless";
        case AttackKind::Drop: return "drop";
    }
    return "?";
}

inline bool attack_kind_from_name(const std::string& s, AttackKind& out) {
    for (AttackKind k : {AttackKind::None, AttackKind::InjectReplay, AttackKind::MasqueradeFuzz,
                         AttackKind::MasqueradeReplay, AttackKind::MasqueradeSeamless,
                         AttackKind::Drop}) {
        if (s == attack_kind_name(k)) {
            out = k;
            return true;
        }
    }
    return false;
}

// Per-frame label: which attack (if any) produced/affected the frame, and a
// running instance number so separate attack occurrences stay distinguishable.
struct FrameLabel {
    AttackKind kind = AttackKind::None;
    uint32_t instance = 0;  // 0 for clean frames, 1-based otherwise

    bool operator==(const FrameLabel& o) const { return kind == o.kind && instance == o.instance; }
};

// A stream plus one label per frame.
struct LabeledStream {
    IdStream stream;
    std::vector<FrameLabel> labels;  // size == stream.frames.size()

    static LabeledStream clean(IdStream s) {
        LabeledStream out;
        out.labels.assign(s.frames.size(), FrameLabel{});
        out.stream = std::move(s);
        return out;
    }
};

// Fixed-length run of consecutive frames of one ID.
struct Window {
    uint16_t id = 0;
    size_t start_index = 0;               // index into the source stream
    std::vector<CanFrame> frames;         // verbatim slice
    AttackKind label = AttackKind::None;  // dominant attack label, None if clean
    uint32_t instance = 0;                // instance of the first attacked frame
};

inline constexpr size_t kWindowLen = 40;

// Contiguous per-vehicle slice of a stream, by index.
struct Partition {
    uint32_t vehicle_id = 0;
    size_t first = 0;  // index of first frame
    size_t count = 0;  // number of frames
};

// ---------------------------------------------------------------------------
// Parse / serialize
// ---------------------------------------------------------------------------

namespace detail {

inline void split_csv(const std::string& line, std::vector<std::string>& out) {
    out.clear();
    size_t start = 0;
    while (true) {
        size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            return;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::vector<CanFrame> parse_log(std::istream& in) {
    std::vector<CanFrame> frames;
    std::string line;
    std::vector<std::string> fields;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        detail::split_csv(t, fields);
        if (fields.size() != 4)
            throw MalformedLine("line " + std::to_string(lineno) + ": expected 4 fields, got " +
                                std::to_string(fields.size()));
        CanFrame f;

        // timestamp: non-negative decimal seconds
        const std::string ts = detail::trim(fields[0]);
        try {
            size_t used = 0;
            f.timestamp = std::stod(ts, &used);
            if (used != ts.size()) throw std::invalid_argument("trailing junk");
        } catch (const std::exception&) {
            throw MalformedLine("line " + std::to_string(lineno) + ": bad timestamp '" + ts + "'");
        }
        if (f.timestamp < 0.0)
            throw MalformedLine("line " + std::to_string(lineno) + ": negative timestamp");

        // id: hex, 11-bit
        uint64_t id = 0;
        const std::string id_s = detail::trim(fields[1]);
        if (!parse_hex_u64(id_s, id))
            throw InvalidId("line " + std::to_string(lineno) + ": bad id '" + id_s + "'");
        if (id > 0x7FF)
            throw InvalidId("line " + std::to_string(lineno) + ": id 0x" + id_s +
                            " exceeds 11 bits");
        f.id = static_cast<uint16_t>(id);

        // dlc: 0..8 decimal
        const std::string dlc_s = detail::trim(fields[2]);
        if (dlc_s.empty() || dlc_s.size() > 1 || dlc_s[0] < '0' || dlc_s[0] > '8')
            throw MalformedLine("line " + std::to_string(lineno) + ": bad dlc '" + dlc_s + "'");
        f.dlc = static_cast<uint8_t>(dlc_s[0] - '0');

        // payload: exactly dlc bytes of hex
        const std::string hex = detail::trim(fields[3]);
        if (hex.size() != static_cast<size_t>(f.dlc) * 2)
            throw DlcMismatch("line " + std::to_string(lineno) + ": dlc " +
                              std::to_string(f.dlc) + " but payload has " +
                              std::to_string(hex.size() / 2) + " bytes");
        for (size_t i = 0; i < f.dlc; ++i) {
            int hi = hex_digit(hex[2 * i]);
            int lo = hex_digit(hex[2 * i + 1]);
            if (hi < 0 || lo < 0)
                throw MalformedLine("line " + std::to_string(lineno) + ": bad payload hex");
            f.payload[i] = static_cast<uint8_t>((hi << 4) | lo);
        }
        frames.push_back(f);
    }
    return frames;
}

inline std::vector<CanFrame> parse_log_string(const std::string& text) {
    std::istringstream in(text);
    return parse_log(in);
}

// Canonical form: timestamp with 6 decimals, 3-digit uppercase hex ID,
// uppercase payload hex, one frame per line, '\n' line ends.
inline std::string serialize_frame(const CanFrame& f) {
    char buf[64];
    int n = std::snprintf(buf, sizeof buf, "%.6f,%03X,%u,", f.timestamp, f.id, f.dlc);
    std::string line(buf, static_cast<size_t>(n));
    static const char* digits = "0123456789ABCDEF";
    for (size_t i = 0; i < f.dlc; ++i) {
        line.push_back(digits[f.payload[i] >> 4]);
        line.push_back(digits[f.payload[i] & 0xF]);
    }
    return line;
}

inline std::string serialize(const std::vector<CanFrame>& frames) {
    std::string out;
    for (const auto& f : frames) {
        out += serialize_frame(f);
        out.push_back('\n');
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stream manipulation
// ---------------------------------------------------------------------------

// Splits a mixed trace into per-ID streams, preserving relative order.
inline std::vector<IdStream> split_by_id(const std::vector<CanFrame>& frames) {
    std::map<uint16_t, size_t> slot;
    std::vector<IdStream> out;
    for (const auto& f : frames) {
        auto it = slot.find(f.id);
        if (it == slot.end()) {
            it = slot.emplace(f.id, out.size()).first;
            out.push_back(IdStream{f.id, {}});
        }
        out[it->second].frames.push_back(f);
    }
    std::sort(out.begin(), out.end(),
              [](const IdStream& a, const IdStream& b) { return a.id < b.id; });
    return out;
}

// Median inter-arrival time of a stream; needs at least two frames.
inline double median_inter_arrival(const IdStream& s) {
    if (s.frames.size() < 2) throw EmptyDataset("median_inter_arrival: need >= 2 frames");
    std::vector<double> gaps;
    gaps.reserve(s.frames.size() - 1);
    for (size_t i = 1; i < s.frames.size(); ++i)
        gaps.push_back(s.frames[i].timestamp - s.frames[i - 1].timestamp);
    std::sort(gaps.begin(), gaps.end());
    size_t n = gaps.size();
    if (n % 2 == 1) return gaps[n / 2];
    return 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]);
}

// Sliding windows of kWindowLen frames. Starts at 0, stride apart, only
// windows that fit completely: count == max(0, floor((n-40)/stride)+1).
inline std::vector<Window> windows(const IdStream& s, size_t stride = 1) {
    if (stride == 0) throw OutOfRange("windows: stride must be >= 1");
    std::vector<Window> out;
    const size_t n = s.frames.size();
    if (n < kWindowLen) return out;
    for (size_t i = 0; i + kWindowLen <= n; i += stride) {
        Window w;
        w.id = s.id;
        w.start_index = i;
        w.frames.assign(s.frames.begin() + static_cast<std::ptrdiff_t>(i),
                        s.frames.begin() + static_cast<std::ptrdiff_t>(i + kWindowLen));
        out.push_back(std::move(w));
    }
    return out;
}

// Labeled variant: a window is attributed to an attack when at least
// min_attack_frames of its frames carry an attack label; the label and
// instance come from the first attacked frame inside the window.
inline std::vector<Window> windows(const LabeledStream& ls, size_t stride = 1,
                                   size_t min_attack_frames = 1) {
    std::vector<Window> out = windows(ls.stream, stride);
    for (auto& w : out) {
        size_t attacked = 0;
        for (size_t i = w.start_index; i < w.start_index + kWindowLen; ++i)
            if (ls.labels[i].kind != AttackKind::None) ++attacked;
        if (attacked >= min_attack_frames && min_attack_frames > 0) {
            for (size_t i = w.start_index; i < w.start_index + kWindowLen; ++i) {
                if (ls.labels[i].kind != AttackKind::None) {
                    w.label = ls.labels[i].kind;
                    w.instance = ls.labels[i].instance;
                    break;
                }
            }
        }
    }
    return out;
}

// Contiguous split into `vehicles` slices; the first (n % vehicles) slices
// get one extra frame, so sizes differ by at most one and order is kept.
inline std::vector<Partition> partition(const IdStream& s, uint32_t vehicles) {
    if (vehicles == 0) throw OutOfRange("partition: vehicles must be >= 1");
    const size_t n = s.frames.size();
    if (n < vehicles)
        throw EmptyDataset("partition: " + std::to_string(n) + " frames cannot cover " +
                           std::to_string(vehicles) + " vehicles");
    std::vector<Partition> out;
    out.reserve(vehicles);
    const size_t base = n / vehicles;
    const size_t extra = n % vehicles;
    size_t pos = 0;
    for (uint32_t v = 0; v < vehicles; ++v) {
        size_t count = base + (v < extra ? 1 : 0);
        out.push_back(Partition{v, pos, count});
        pos += count;
    }
    return out;
}

inline IdStream slice(const IdStream& s, const Partition& p) {
    IdStream out;
    out.id = s.id;
    out.frames.assign(s.frames.begin() + static_cast<std::ptrdiff_t>(p.first),
                      s.frames.begin() + static_cast<std::ptrdiff_t>(p.first + p.count));
    return out;
}

inline IdStream slice(const IdStream& s, size_t first, size_t count) {
    return slice(s, Partition{0, first, count});
}

// Fractional train/val/test split by frame count (floor for the first two).
struct SplitSlices {
    IdStream train, val, test;
};

inline SplitSlices split_stream(const IdStream& s, double train_frac, double val_frac) {
    if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0)
        throw OutOfRange("split_stream: bad fractions");
    const size_t n = s.frames.size();
    const size_t n_train = static_cast<size_t>(static_cast<double>(n) * train_frac);
    const size_t n_val = static_cast<size_t>(static_cast<double>(n) * val_frac);
    SplitSlices out;
    out.train = slice(s, 0, n_train);
    out.val = slice(s, n_train, n_val);
    out.test = slice(s, n_train + n_val, n - n_train - n_val);
    return out;
}

}  // namespace fcw
