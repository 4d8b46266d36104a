#include <catch2/catch_amalgamated.hpp>

#include "fcw/can.hpp"
#include "fcw/synth.hpp"

using namespace fcw;

TEST_CASE("parse_log reads canonical lines") {
    auto frames = parse_log_string("0.000,1F7,8,0011223344556677\n");
    REQUIRE(frames.size() == 1);
    CHECK(frames[0].timestamp == 0.0);
    CHECK(frames[0].id == 0x1F7);
    CHECK(frames[0].dlc == 8);
    CHECK(frames[0].payload == std::array<uint8_t, 8>{0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66,
                                                      0x77});
}

TEST_CASE("parse_log skips comments and blank lines, accepts lowercase hex") {
    auto frames = parse_log_string(
        "# a comment\n"
        "\n"
        "1.500000,0aa,3,aabbcc\n"
        "   \n"
        "2.000000,7FF,0,\n");
    REQUIRE(frames.size() == 2);
    CHECK(frames[0].id == 0x0AA);
    CHECK(frames[0].payload[2] == 0xCC);
    CHECK(frames[1].id == 0x7FF);
    CHECK(frames[1].dlc == 0);
}

TEST_CASE("parse_log error taxonomy") {
    CHECK_THROWS_AS(parse_log_string("0.0,1F7,8\n"), MalformedLine);           // 3 fields
    CHECK_THROWS_AS(parse_log_string("x,1F7,1,AA\n"), MalformedLine);          // bad timestamp
    CHECK_THROWS_AS(parse_log_string("-1.0,1F7,1,AA\n"), MalformedLine);       // negative ts
    CHECK_THROWS_AS(parse_log_string("0.0,XYZ,1,AA\n"), InvalidId);            // bad hex
    CHECK_THROWS_AS(parse_log_string("0.0,800,1,AA\n"), InvalidId);            // > 11 bits
    CHECK_THROWS_AS(parse_log_string("0.0,1F7,9,AA\n"), MalformedLine);        // dlc > 8
    CHECK_THROWS_AS(parse_log_string("0.0,1F7,2,AA\n"), DlcMismatch);          // short payload
    CHECK_THROWS_AS(parse_log_string("0.0,1F7,1,AABB\n"), DlcMismatch);        // long payload
    CHECK_THROWS_AS(parse_log_string("0.0,1F7,1,GG\n"), MalformedLine);        // bad payload hex
}

TEST_CASE("serialize emits canonical form and round-trips") {
    const std::string canonical = "0.000000,1F7,8,0011223344556677\n12.345678,0AA,2,BEEF\n";
    auto frames = parse_log_string(canonical);
    CHECK(serialize(frames) == canonical);
    // non-canonical input normalizes to canonical
    auto frames2 = parse_log_string("0.0,1f7,8,0011223344556677\n12.345678,aa,2,beef\n");
    CHECK(serialize(frames2) == canonical);
    // parse(serialize(x)) == x
    auto reparsed = parse_log_string(serialize(frames));
    CHECK(reparsed == frames);
}

TEST_CASE("split_by_id groups and preserves order") {
    auto frames = parse_log_string(
        "0.000000,100,1,AA\n"
        "0.001000,200,1,BB\n"
        "0.002000,100,1,CC\n");
    auto streams = split_by_id(frames);
    REQUIRE(streams.size() == 2);
    CHECK(streams[0].id == 0x100);
    REQUIRE(streams[0].frames.size() == 2);
    CHECK(streams[0].frames[0].payload[0] == 0xAA);
    CHECK(streams[0].frames[1].payload[0] == 0xCC);
    CHECK(streams[1].id == 0x200);
}

TEST_CASE("median inter-arrival") {
    IdStream s;
    s.id = 1;
    for (double t : {0.0, 0.010, 0.020, 0.050}) {
        CanFrame f;
        f.timestamp = t;
        f.id = 1;
        s.frames.push_back(f);
    }
    // gaps 0.010, 0.010, 0.030 -> median 0.010
    CHECK_THAT(median_inter_arrival(s), Catch::Matchers::WithinAbs(0.010, 1e-12));
    s.frames.pop_back();  // gaps 0.010, 0.010
    CHECK_THAT(median_inter_arrival(s), Catch::Matchers::WithinAbs(0.010, 1e-12));
    s.frames.resize(1);
    CHECK_THROWS_AS(median_inter_arrival(s), EmptyDataset);
}

static IdStream make_stream(size_t n, uint16_t id = 0x100) {
    IdStream s;
    s.id = id;
    for (size_t i = 0; i < n; ++i) {
        CanFrame f;
        f.timestamp = static_cast<double>(i) * 0.01;
        f.id = id;
        f.dlc = 1;
        f.payload[0] = static_cast<uint8_t>(i);
        s.frames.push_back(f);
    }
    return s;
}

TEST_CASE("windows: counts, stride, verbatim content") {
    CHECK(windows(make_stream(100), 1).size() == 61);
    CHECK(windows(make_stream(39), 1).empty());
    CHECK(windows(make_stream(40), 1).size() == 1);
    CHECK(windows(make_stream(80), 40).size() == 2);
    CHECK(windows(make_stream(81), 40).size() == 2);
    auto ws = windows(make_stream(50), 5);
    REQUIRE(ws.size() == 3);
    CHECK(ws[1].start_index == 5);
    CHECK(ws[1].frames.size() == kWindowLen);
    CHECK(ws[1].frames[0].payload[0] == 5);
    CHECK(ws[1].frames[39].payload[0] == 44);
    CHECK(ws[0].label == AttackKind::None);
    CHECK_THROWS_AS(windows(make_stream(50), 0), OutOfRange);
}

TEST_CASE("labeled windows pick up the first attacked frame's label") {
    auto ls = LabeledStream::clean(make_stream(60));
    ls.labels[45] = FrameLabel{AttackKind::Drop, 3};
    ls.labels[46] = FrameLabel{AttackKind::Drop, 3};
    auto ws = windows(ls, 1);
    REQUIRE(ws.size() == 21);
    CHECK(ws[5].label == AttackKind::None);   // covers 5..44
    CHECK(ws[6].label == AttackKind::Drop);   // covers 6..45
    CHECK(ws[6].instance == 3);
    CHECK(ws[20].label == AttackKind::Drop);  // covers 20..59
    // with a 2-frame minimum, the window containing only frame 45 is clean
    auto ws2 = windows(ls, 1, 2);
    CHECK(ws2[6].label == AttackKind::None);
    CHECK(ws2[7].label == AttackKind::Drop);  // covers 7..46: both frames
}

TEST_CASE("partition: near-equal contiguous slices in order") {
    auto s = make_stream(10);
    auto parts = partition(s, 3);
    REQUIRE(parts.size() == 3);
    CHECK(parts[0].count == 4);
    CHECK(parts[1].count == 3);
    CHECK(parts[2].count == 3);
    CHECK(parts[0].first == 0);
    CHECK(parts[1].first == 4);
    CHECK(parts[2].first == 7);
    CHECK(parts[0].vehicle_id == 0);
    CHECK(parts[2].vehicle_id == 2);
    auto sl = slice(s, parts[1]);
    CHECK(sl.frames.size() == 3);
    CHECK(sl.frames[0].payload[0] == 4);

    // 724350 frames over 50 vehicles -> 14487 each
    IdStream big;
    big.id = 0x192;
    big.frames.resize(724350);
    auto parts50 = partition(big, 50);
    REQUIRE(parts50.size() == 50);
    for (const auto& p : parts50) CHECK(p.count == 14487);

    CHECK_THROWS_AS(partition(make_stream(2), 3), EmptyDataset);
    CHECK_THROWS_AS(partition(s, 0), OutOfRange);
}

TEST_CASE("split_stream fractions") {
    auto s = make_stream(100);
    auto sp = split_stream(s, 0.6, 0.2);
    CHECK(sp.train.frames.size() == 60);
    CHECK(sp.val.frames.size() == 20);
    CHECK(sp.test.frames.size() == 20);
    CHECK(sp.val.frames[0].payload[0] == 60);
    CHECK(sp.test.frames[0].payload[0] == 80);
    CHECK_THROWS_AS(split_stream(s, 0.8, 0.3), OutOfRange);
}

// ---------------------------------------------------------------------------
// Synthesizer
// ---------------------------------------------------------------------------

static SynthIdSpec basic_spec() {
    SynthIdSpec spec;
    spec.id = 0x100;
    spec.dlc = 4;
    spec.period_s = 0.01;
    spec.signals = {
        SignalDynamics{SignalClass::Counter, 0, 8, 0, 0},
        SignalDynamics{SignalClass::Physical, 8, 16, 30000, 2500},
        SignalDynamics{SignalClass::Constant, 24, 8, 0x5A, 0},
    };
    return spec;
}

TEST_CASE("synthesize_id: frame count, period grid, determinism") {
    auto spec = basic_spec();
    auto frames = synthesize_id(spec, 1.0, 42);
    REQUIRE(frames.size() == 100);  // t = 0.00 .. 0.99
    CHECK(frames[0].timestamp == 0.0);
    CHECK_THAT(frames[99].timestamp, Catch::Matchers::WithinAbs(0.99, 1e-9));
    CHECK(frames[5].dlc == 4);

    auto again = synthesize_id(spec, 1.0, 42);
    CHECK(frames == again);
    auto other = synthesize_id(spec, 1.0, 43);
    CHECK(frames != other);
}

TEST_CASE("synthesize_id: planted dynamics behave") {
    auto spec = basic_spec();
    auto frames = synthesize_id(spec, 2.0, 7);
    const Signal counter{0, 8, SignalClass::Counter};
    const Signal physical{8, 16, SignalClass::Physical};
    const Signal constant{24, 8, SignalClass::Constant};
    for (size_t i = 1; i < frames.size(); ++i) {
        uint64_t prev = decode_signal(frames[i - 1].payload, counter);
        uint64_t cur = decode_signal(frames[i].payload, counter);
        CHECK(cur == ((prev + 1) & 0xFF));
        int64_t dp = static_cast<int64_t>(decode_signal(frames[i].payload, physical)) -
                     static_cast<int64_t>(decode_signal(frames[i - 1].payload, physical));
        CHECK(std::abs(dp) <= 2500);
        CHECK(decode_signal(frames[i].payload, constant) == 0x5A);
    }
}

TEST_CASE("synthesize_id: checksum byte equals sum of others mod 256") {
    SynthIdSpec spec;
    spec.id = 0x200;
    spec.dlc = 4;
    spec.period_s = 0.005;
    spec.signals = {
        SignalDynamics{SignalClass::Physical, 0, 16, 30000, 3000},
        SignalDynamics{SignalClass::Counter, 16, 8, 0, 0},
        SignalDynamics{SignalClass::Checksum, 24, 8, 0, 0},
    };
    auto frames = synthesize_id(spec, 1.0, 5);
    REQUIRE(frames.size() == 200);
    for (const auto& f : frames) {
        unsigned sum = f.payload[0] + f.payload[1] + f.payload[2];
        CHECK(f.payload[3] == (sum & 0xFF));
    }
}

TEST_CASE("synthesize_traffic merges IDs time-ordered") {
    auto a = basic_spec();
    auto b = basic_spec();
    b.id = 0x101;
    b.period_s = 0.007;
    auto frames = synthesize_traffic({a, b}, 0.5, 9);
    REQUIRE(frames.size() == 50 + 72);  // 0.5/0.01 and ceil(0.5/0.007)
    for (size_t i = 1; i < frames.size(); ++i)
        CHECK(frames[i - 1].timestamp <= frames[i].timestamp);
    auto streams = split_by_id(frames);
    REQUIRE(streams.size() == 2);
    CHECK(streams[0].frames.size() == 50);
    // per-ID content identical to standalone synthesis
    CHECK(streams[0].frames == synthesize_id(a, 0.5, 9));
}

TEST_CASE("synthesize_id validates its spec") {
    auto spec = basic_spec();
    spec.signals[2].length = 4;  // leaves bits uncovered
    CHECK_THROWS_AS(synthesize_id(spec, 0.1, 1), OutOfRange);
    spec = basic_spec();
    spec.signals[1].start_bit = 4;  // overlap with the counter
    CHECK_THROWS_AS(synthesize_id(spec, 0.1, 1), OutOfRange);
    spec = basic_spec();
    spec.period_s = 0;
    CHECK_THROWS_AS(synthesize_id(spec, 0.1, 1), OutOfRange);
}

TEST_CASE("synthesize_id jitter keeps timestamps strictly increasing") {
    auto spec = basic_spec();
    spec.jitter_frac = 0.4;
    auto frames = synthesize_id(spec, 2.0, 11);
    for (size_t i = 1; i < frames.size(); ++i)
        CHECK(frames[i - 1].timestamp < frames[i].timestamp);
}
