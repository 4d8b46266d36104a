#pragma once
// Attack synthesis over per-ID streams. Five primitives:
//   inject_replay        insert copies of the preceding frames (extra frames)
//   masquerade_fuzz      randomize every non-CONSTANT bit in place
//   masquerade_replay    overwrite payloads with the frames just before
//   masquerade_seamless  ramp one PHYSICAL signal to its farther extreme
//   drop                 remove a region (the frame after the gap is marked)
// All ops label affected frames and keep timestamps strictly consistent:
// masquerades/drops never touch timestamps, injections interleave between
// the neighbouring genuine frames.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fcw/can.hpp"
#include "fcw/segmentation.hpp"

namespace fcw {

struct MissingLayout : std::runtime_error {
    explicit MissingLayout(const std::string& what) : std::runtime_error(what) {}
};
struct NotAPhysicalSignal : std::runtime_error {
    explicit NotAPhysicalSignal(const std::string& what) : std::runtime_error(what) {}
};

struct AttackSpec {
    AttackKind kind = AttackKind::InjectReplay;
    uint16_t id = 0;
    size_t start_index = 0;  // first affected frame (insertion point for inject)
    size_t length = 25;      // frames affected / inserted / dropped
    uint64_t seed = 0;       // fuzz randomness
    std::optional<size_t> target_signal;  // seamless: index into layout.signals
};

namespace detail {

inline uint32_t next_instance(const LabeledStream& ls) {
    uint32_t m = 0;
    for (const auto& l : ls.labels) m = std::max(m, l.instance);
    return m + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// inject_replay: insert `length` frames before index start, cloning the
// `length` frames that precede the insertion point. Inserted timestamps walk
// forward from the last genuine frame in steps of half the stream's median
// inter-arrival, clamped so they never pass the next genuine frame.
// ---------------------------------------------------------------------------
inline LabeledStream inject_replay(const LabeledStream& in, const AttackSpec& spec) {
    const auto& frames = in.stream.frames;
    const size_t n = frames.size();
    if (spec.length == 0 || spec.start_index < spec.length || spec.start_index > n)
        throw OutOfRange("inject_replay: start " + std::to_string(spec.start_index) +
                         " length " + std::to_string(spec.length) + " on " + std::to_string(n) +
                         " frames");
    const double med = median_inter_arrival(in.stream);
    const double base = frames[spec.start_index - 1].timestamp;
    const bool capped = spec.start_index < n;
    const double cap = capped ? frames[spec.start_index].timestamp : 0.0;

    LabeledStream out;
    out.stream.id = in.stream.id;
    out.stream.frames.reserve(n + spec.length);
    out.labels.reserve(n + spec.length);
    const uint32_t instance = detail::next_instance(in);

    for (size_t i = 0; i < spec.start_index; ++i) {
        out.stream.frames.push_back(frames[i]);
        out.labels.push_back(in.labels[i]);
    }
    for (size_t i = 0; i < spec.length; ++i) {
        CanFrame f = frames[spec.start_index - spec.length + i];
        double ts = base + static_cast<double>(i + 1) * med * 0.5;
        if (capped && ts > cap) ts = cap;
        f.timestamp = ts;
        out.stream.frames.push_back(f);
        out.labels.push_back(FrameLabel{spec.kind, instance});
    }
    for (size_t i = spec.start_index; i < n; ++i) {
        out.stream.frames.push_back(frames[i]);
        out.labels.push_back(in.labels[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// masquerade_fuzz: in [start, start+length), re-randomize every payload bit
// that is not covered by a CONSTANT signal. Timestamps, ids, dlc untouched.
// ---------------------------------------------------------------------------
inline LabeledStream masquerade_fuzz(const LabeledStream& in, const AttackSpec& spec,
                                     const SignalLayout* layout) {
    const size_t n = in.stream.frames.size();
    if (spec.length == 0 || spec.start_index + spec.length > n)
        throw OutOfRange("masquerade_fuzz: region outside stream");
    if (!layout)
        throw MissingLayout("masquerade_fuzz: id " + std::to_string(in.stream.id) +
                            " has no layout");
    LabeledStream out = in;
    Rng rng(spec.seed);
    const uint32_t instance = detail::next_instance(in);
    for (size_t i = spec.start_index; i < spec.start_index + spec.length; ++i) {
        CanFrame& f = out.stream.frames[i];
        const size_t W = static_cast<size_t>(f.dlc) * 8;
        std::vector<bool> frozen(W, false);
        for (const auto& s : layout->signals)
            if (s.cls == SignalClass::Constant)
                for (size_t b = s.start_bit; b < static_cast<size_t>(s.start_bit) + s.length; ++b)
                    if (b < W) frozen[b] = true;
        for (size_t b = 0; b < W; ++b)
            if (!frozen[b]) set_payload_bit(f.payload, b, rng.chance(0.5) ? 1 : 0);
        out.labels[i] = FrameLabel{spec.kind, instance};
    }
    return out;
}

// ---------------------------------------------------------------------------
// masquerade_replay: overwrite payload+dlc of [start, start+length) with the
// `length` frames immediately before the region. Timestamps untouched.
// ---------------------------------------------------------------------------
inline LabeledStream masquerade_replay(const LabeledStream& in, const AttackSpec& spec) {
    const size_t n = in.stream.frames.size();
    if (spec.length == 0 || spec.start_index < spec.length ||
        spec.start_index + spec.length > n)
        throw OutOfRange("masquerade_replay: region outside stream");
    LabeledStream out = in;
    const uint32_t instance = detail::next_instance(in);
    for (size_t i = 0; i < spec.length; ++i) {
        const CanFrame& src = in.stream.frames[spec.start_index - spec.length + i];
        CanFrame& dst = out.stream.frames[spec.start_index + i];
        dst.payload = src.payload;
        dst.dlc = src.dlc;
        out.labels[spec.start_index + i] = FrameLabel{spec.kind, instance};
    }
    return out;
}

// ---------------------------------------------------------------------------
// masquerade_seamless: ramp one PHYSICAL signal linearly from the last
// genuine value to whichever range extreme lies farther away. Other bits and
// all timestamps untouched. length == 1 degenerates to a jump to the extreme.
// ---------------------------------------------------------------------------
inline LabeledStream masquerade_seamless(const LabeledStream& in, const AttackSpec& spec,
                                         const SignalLayout* layout) {
    const size_t n = in.stream.frames.size();
    if (spec.length == 0 || spec.start_index == 0 || spec.start_index + spec.length > n)
        throw OutOfRange("masquerade_seamless: region outside stream (needs one frame before)");
    if (!layout)
        throw MissingLayout("masquerade_seamless: id " + std::to_string(in.stream.id) +
                            " has no layout");
    if (!spec.target_signal || *spec.target_signal >= layout->signals.size())
        throw OutOfRange("masquerade_seamless: bad target signal index");
    const Signal& sig = layout->signals[*spec.target_signal];
    if (sig.cls != SignalClass::Physical)
        throw NotAPhysicalSignal("masquerade_seamless: target signal is " +
                                 std::string(signal_class_name(sig.cls)));

    const uint64_t maxv = signal_max_value(sig);
    const double v0 =
        static_cast<double>(decode_signal(in.stream.frames[spec.start_index - 1].payload, sig));
    const double extreme = v0 < static_cast<double>(maxv) / 2.0 ? static_cast<double>(maxv) : 0.0;

    LabeledStream out = in;
    const uint32_t instance = detail::next_instance(in);
    for (size_t i = 0; i < spec.length; ++i) {
        double v = spec.length == 1
                       ? extreme
                       : v0 + static_cast<double>(i) * (extreme - v0) /
                                 static_cast<double>(spec.length - 1);
        uint64_t raw = static_cast<uint64_t>(std::llround(v));
        if (raw > maxv) raw = maxv;
        CanFrame& f = out.stream.frames[spec.start_index + i];
        encode_signal(f.payload, sig, raw);
        out.labels[spec.start_index + i] = FrameLabel{spec.kind, instance};
    }
    return out;
}

// ---------------------------------------------------------------------------
// drop: remove [start, start+length) and mark the first surviving frame
// after the gap (or the last frame if the tail was dropped). Removing the
// whole stream is rejected.
// ---------------------------------------------------------------------------
inline LabeledStream drop_attack(const LabeledStream& in, const AttackSpec& spec) {
    const size_t n = in.stream.frames.size();
    if (spec.length == 0 || spec.start_index + spec.length > n || spec.length >= n)
        throw OutOfRange("drop: region outside stream or removes every frame");
    LabeledStream out;
    out.stream.id = in.stream.id;
    out.stream.frames.reserve(n - spec.length);
    out.labels.reserve(n - spec.length);
    const uint32_t instance = detail::next_instance(in);
    for (size_t i = 0; i < n; ++i) {
        if (i >= spec.start_index && i < spec.start_index + spec.length) continue;
        out.stream.frames.push_back(in.stream.frames[i]);
        out.labels.push_back(in.labels[i]);
    }
    size_t mark = std::min(spec.start_index, out.stream.frames.size() - 1);
    out.labels[mark] = FrameLabel{spec.kind, instance};
    return out;
}

// ---------------------------------------------------------------------------
// Dispatch + manifests
// ---------------------------------------------------------------------------

inline LabeledStream apply_attack(const LabeledStream& in, const AttackSpec& spec,
                                  const SignalLayout* layout = nullptr) {
    switch (spec.kind) {
        case AttackKind::InjectReplay: return inject_replay(in, spec);
        case AttackKind::MasqueradeFuzz: return masquerade_fuzz(in, spec, layout);
        case AttackKind::MasqueradeReplay: return masquerade_replay(in, spec);
        case AttackKind::MasqueradeSeamless: return masquerade_seamless(in, spec, layout);
        case AttackKind::Drop: return drop_attack(in, spec);
        case AttackKind::None: break;
    }
    throw OutOfRange("apply_attack: not an attack kind");
}

// Manifest line: kind,id_hex,start_index,length,seed[,signal_index]
inline std::string serialize_manifest(const std::vector<AttackSpec>& specs) {
    std::string out = "# kind,id_hex,start_index,length,seed[,signal_index]\n";
    for (const auto& s : specs) {
        char idbuf[8];
        std::snprintf(idbuf, sizeof idbuf, "%03X", s.id);
        out += attack_kind_name(s.kind);
        out += ',';
        out += idbuf;
        out += ',' + std::to_string(s.start_index) + ',' + std::to_string(s.length) + ',' +
               std::to_string(s.seed);
        if (s.target_signal) out += ',' + std::to_string(*s.target_signal);
        out.push_back('\n');
    }
    return out;
}

inline std::vector<AttackSpec> parse_manifest(const std::string& text) {
    std::vector<AttackSpec> out;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> fields;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        detail::split_csv(t, fields);
        if (fields.size() != 5 && fields.size() != 6)
            throw MalformedLine("manifest line " + std::to_string(lineno) +
                                ": expected 5 or 6 fields");
        AttackSpec s;
        if (!attack_kind_from_name(detail::trim(fields[0]), s.kind) ||
            s.kind == AttackKind::None)
            throw MalformedLine("manifest line " + std::to_string(lineno) + ": bad kind '" +
                                fields[0] + "'");
        uint64_t id = 0;
        if (!parse_hex_u64(detail::trim(fields[1]), id) || id > 0x7FF)
            throw InvalidId("manifest line " + std::to_string(lineno) + ": bad id");
        s.id = static_cast<uint16_t>(id);
        try {
            s.start_index = std::stoull(detail::trim(fields[2]));
            s.length = std::stoull(detail::trim(fields[3]));
            s.seed = std::stoull(detail::trim(fields[4]));
            if (fields.size() == 6) s.target_signal = std::stoull(detail::trim(fields[5]));
        } catch (const std::exception&) {
            throw MalformedLine("manifest line " + std::to_string(lineno) + ": bad number");
        }
        out.push_back(s);
    }
    return out;
}

// Label sidecar: one line per frame, '0' for clean or the attack kind name.
inline std::string serialize_labels(const std::vector<FrameLabel>& labels) {
    std::string out;
    for (const auto& l : labels) {
        out += l.kind == AttackKind::None ? "0" : attack_kind_name(l.kind);
        out.push_back('\n');
    }
    return out;
}

// Instances are reconstructed from contiguity: a maximal run of frames with
// the same attack kind forms one instance.
inline std::vector<FrameLabel> parse_labels(const std::string& text) {
    std::vector<FrameLabel> out;
    std::istringstream in(text);
    std::string line;
    uint32_t instance = 0;
    AttackKind prev = AttackKind::None;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty()) continue;
        FrameLabel l;
        if (t == "0") {
            l = FrameLabel{};
        } else {
            if (!attack_kind_from_name(t, l.kind))
                throw MalformedLine("label line " + std::to_string(lineno) + ": bad kind '" + t +
                                    "'");
            if (l.kind != prev) ++instance;
            l.instance = instance;
        }
        prev = l.kind;
        out.push_back(l);
    }
    return out;
}

}  // namespace fcw
