#include <catch2/catch_amalgamated.hpp>

#include "fcw/attack.hpp"
#include "fcw/synth.hpp"

using namespace fcw;

namespace {

IdStream regular_stream(size_t n, double period = 0.01) {
    IdStream s;
    s.id = 0x123;
    for (size_t i = 0; i < n; ++i) {
        CanFrame f;
        f.timestamp = static_cast<double>(i) * period;
        f.id = s.id;
        f.dlc = 2;
        f.payload[0] = static_cast<uint8_t>(i);
        f.payload[1] = static_cast<uint8_t>(i * 3 + 1);
        s.frames.push_back(f);
    }
    return s;
}

bool timestamps_sorted(const IdStream& s) {
    for (size_t i = 1; i < s.frames.size(); ++i)
        if (s.frames[i].timestamp < s.frames[i - 1].timestamp) return false;
    return true;
}

}  // namespace

TEST_CASE("inject_replay inserts copies with interleaved timestamps") {
    auto in = LabeledStream::clean(regular_stream(10));
    AttackSpec spec;
    spec.kind = AttackKind::InjectReplay;
    spec.start_index = 5;
    spec.length = 3;
    auto out = inject_replay(in, spec);

    REQUIRE(out.stream.frames.size() == 13);
    REQUIRE(out.labels.size() == 13);
    // payloads replicate frames 2,3,4
    for (size_t i = 0; i < 3; ++i) {
        CHECK(out.stream.frames[5 + i].payload == in.stream.frames[2 + i].payload);
        CHECK(out.labels[5 + i].kind == AttackKind::InjectReplay);
        CHECK(out.labels[5 + i].instance == 1);
    }
    // timestamps: base 0.04, median gap 0.01 -> 0.045 then clamped at 0.05
    CHECK_THAT(out.stream.frames[5].timestamp, Catch::Matchers::WithinAbs(0.045, 1e-12));
    CHECK_THAT(out.stream.frames[6].timestamp, Catch::Matchers::WithinAbs(0.05, 1e-12));
    CHECK_THAT(out.stream.frames[7].timestamp, Catch::Matchers::WithinAbs(0.05, 1e-12));
    CHECK(timestamps_sorted(out.stream));
    // genuine frames untouched and in order
    for (size_t i = 0; i < 5; ++i) CHECK(out.stream.frames[i] == in.stream.frames[i]);
    for (size_t i = 5; i < 10; ++i) CHECK(out.stream.frames[i + 3] == in.stream.frames[i]);
    for (size_t i = 0; i < 5; ++i) CHECK(out.labels[i].kind == AttackKind::None);
}

TEST_CASE("inject_replay at the stream end has no clamp") {
    auto in = LabeledStream::clean(regular_stream(6));
    AttackSpec spec;
    spec.kind = AttackKind::InjectReplay;
    spec.start_index = 6;
    spec.length = 2;
    auto out = inject_replay(in, spec);
    REQUIRE(out.stream.frames.size() == 8);
    CHECK_THAT(out.stream.frames[6].timestamp, Catch::Matchers::WithinAbs(0.055, 1e-12));
    CHECK_THAT(out.stream.frames[7].timestamp, Catch::Matchers::WithinAbs(0.060, 1e-12));
    CHECK(timestamps_sorted(out.stream));
}

TEST_CASE("inject_replay bounds") {
    auto in = LabeledStream::clean(regular_stream(10));
    AttackSpec spec;
    spec.kind = AttackKind::InjectReplay;
    spec.start_index = 2;
    spec.length = 3;  // start < length
    CHECK_THROWS_AS(inject_replay(in, spec), OutOfRange);
    spec.start_index = 11;  // past the end
    spec.length = 3;
    CHECK_THROWS_AS(inject_replay(in, spec), OutOfRange);
    spec.start_index = 5;
    spec.length = 0;
    CHECK_THROWS_AS(inject_replay(in, spec), OutOfRange);
}

TEST_CASE("masquerade_replay overwrites payloads in place") {
    auto in = LabeledStream::clean(regular_stream(12));
    AttackSpec spec;
    spec.kind = AttackKind::MasqueradeReplay;
    spec.start_index = 6;
    spec.length = 4;
    auto out = masquerade_replay(in, spec);
    REQUIRE(out.stream.frames.size() == 12);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(out.stream.frames[6 + i].payload == in.stream.frames[2 + i].payload);
        CHECK(out.stream.frames[6 + i].timestamp == in.stream.frames[6 + i].timestamp);
        CHECK(out.labels[6 + i].kind == AttackKind::MasqueradeReplay);
    }
    for (size_t i : {0, 1, 2, 3, 4, 5, 10, 11}) CHECK(out.stream.frames[i] == in.stream.frames[i]);

    // start == length uses the first `length` frames
    spec.start_index = 4;
    auto out2 = masquerade_replay(in, spec);
    for (size_t i = 0; i < 4; ++i)
        CHECK(out2.stream.frames[4 + i].payload == in.stream.frames[i].payload);

    spec.start_index = 3;  // start < length
    CHECK_THROWS_AS(masquerade_replay(in, spec), OutOfRange);
    spec.start_index = 10;  // runs off the end
    CHECK_THROWS_AS(masquerade_replay(in, spec), OutOfRange);
}

TEST_CASE("masquerade_fuzz randomizes only non-CONSTANT bits") {
    SynthIdSpec sspec;
    sspec.id = 0x123;
    sspec.dlc = 3;
    sspec.period_s = 0.01;
    sspec.signals = {
        SignalDynamics{SignalClass::Physical, 0, 12, 2000, 300},
        SignalDynamics{SignalClass::Constant, 12, 4, 0xF, 0},
        SignalDynamics{SignalClass::Constant, 16, 8, 0x5A, 0},
    };
    IdStream stream;
    stream.id = sspec.id;
    stream.frames = synthesize_id(sspec, 1.0, 4);
    auto layout = planted_layout(sspec);
    auto in = LabeledStream::clean(stream);

    AttackSpec spec;
    spec.kind = AttackKind::MasqueradeFuzz;
    spec.start_index = 20;
    spec.length = 30;
    spec.seed = 99;
    auto out = masquerade_fuzz(in, spec, &layout);

    REQUIRE(out.stream.frames.size() == in.stream.frames.size());
    size_t changed_bits = 0;
    for (size_t i = 20; i < 50; ++i) {
        const auto& f = out.stream.frames[i];
        CHECK(f.timestamp == in.stream.frames[i].timestamp);
        // constant signals preserved bit-exactly
        CHECK(decode_signal(f.payload, Signal{12, 4, SignalClass::Constant}) == 0xF);
        CHECK(decode_signal(f.payload, Signal{16, 8, SignalClass::Constant}) == 0x5A);
        CHECK(out.labels[i].kind == AttackKind::MasqueradeFuzz);
        for (size_t b = 0; b < 12; ++b)
            if (payload_bit(f.payload, b) != payload_bit(in.stream.frames[i].payload, b))
                ++changed_bits;
    }
    CHECK(changed_bits > 100);  // ~half of 30*12 fuzzed bits differ
    for (size_t i = 0; i < 20; ++i) CHECK(out.stream.frames[i] == in.stream.frames[i]);
    for (size_t i = 50; i < 100; ++i) CHECK(out.stream.frames[i] == in.stream.frames[i]);

    // deterministic per seed
    auto out2 = masquerade_fuzz(in, spec, &layout);
    CHECK(out.stream.frames == out2.stream.frames);
    spec.seed = 100;
    auto out3 = masquerade_fuzz(in, spec, &layout);
    CHECK(out.stream.frames != out3.stream.frames);

    CHECK_THROWS_AS(masquerade_fuzz(in, spec, nullptr), MissingLayout);
    spec.start_index = 90;
    spec.length = 20;
    CHECK_THROWS_AS(masquerade_fuzz(in, spec, &layout), OutOfRange);
}

TEST_CASE("masquerade_seamless ramps to the farther extreme") {
    IdStream stream = regular_stream(20);
    SignalLayout layout;
    layout.id = stream.id;
    layout.width_bits = 16;
    layout.signals = {
        Signal{0, 8, SignalClass::Physical},
        Signal{8, 8, SignalClass::Counter},
    };
    // place a known value in the frame before the attack
    stream.frames[9].payload[0] = 10;
    auto in = LabeledStream::clean(stream);

    AttackSpec spec;
    spec.kind = AttackKind::MasqueradeSeamless;
    spec.start_index = 10;
    spec.length = 5;
    spec.target_signal = 0;
    auto out = masquerade_seamless(in, spec, &layout);

    const Signal sig{0, 8, SignalClass::Physical};
    // v0 = 10 < 127.5 -> extreme 255; ramp 10, 71, 133, 194, 255
    std::vector<uint64_t> expect{10, 71, 133, 194, 255};
    for (size_t i = 0; i < 5; ++i) {
        CHECK(decode_signal(out.stream.frames[10 + i].payload, sig) == expect[i]);
        CHECK(out.stream.frames[10 + i].timestamp == in.stream.frames[10 + i].timestamp);
        // untargeted bits untouched
        CHECK(out.stream.frames[10 + i].payload[1] == in.stream.frames[10 + i].payload[1]);
        CHECK(out.labels[10 + i].kind == AttackKind::MasqueradeSeamless);
    }

    // high starting value ramps down to zero
    stream.frames[9].payload[0] = 200;
    in = LabeledStream::clean(stream);
    out = masquerade_seamless(in, spec, &layout);
    std::vector<uint64_t> expect_down{200, 150, 100, 50, 0};
    for (size_t i = 0; i < 5; ++i)
        CHECK(decode_signal(out.stream.frames[10 + i].payload, sig) == expect_down[i]);

    // single-frame attack jumps straight to the extreme
    spec.length = 1;
    out = masquerade_seamless(in, spec, &layout);
    CHECK(decode_signal(out.stream.frames[10].payload, sig) == 0);

    spec.length = 5;
    spec.target_signal = 1;
    CHECK_THROWS_AS(masquerade_seamless(in, spec, &layout), NotAPhysicalSignal);
    spec.target_signal = 7;
    CHECK_THROWS_AS(masquerade_seamless(in, spec, &layout), OutOfRange);
    spec.target_signal = 0;
    spec.start_index = 0;  // no preceding genuine frame
    CHECK_THROWS_AS(masquerade_seamless(in, spec, &layout), OutOfRange);
    spec.start_index = 18;
    spec.length = 5;  // runs off the end
    CHECK_THROWS_AS(masquerade_seamless(in, spec, &layout), OutOfRange);
    spec.start_index = 10;  // valid bounds again: only the layout is missing
    CHECK_THROWS_AS(masquerade_seamless(in, spec, nullptr), MissingLayout);
}

TEST_CASE("drop removes the region and marks the frame after the gap") {
    auto in = LabeledStream::clean(regular_stream(10));
    AttackSpec spec;
    spec.kind = AttackKind::Drop;
    spec.start_index = 4;
    spec.length = 3;
    auto out = drop_attack(in, spec);
    REQUIRE(out.stream.frames.size() == 7);
    for (size_t i = 0; i < 4; ++i) CHECK(out.stream.frames[i] == in.stream.frames[i]);
    for (size_t i = 4; i < 7; ++i) CHECK(out.stream.frames[i] == in.stream.frames[i + 3]);
    CHECK(out.labels[4].kind == AttackKind::Drop);
    CHECK(out.labels[3].kind == AttackKind::None);
    CHECK(out.labels[5].kind == AttackKind::None);

    // dropping the tail marks the new last frame
    spec.start_index = 7;
    auto out2 = drop_attack(in, spec);
    REQUIRE(out2.stream.frames.size() == 7);
    CHECK(out2.labels[6].kind == AttackKind::Drop);

    spec.start_index = 0;
    spec.length = 10;  // would remove everything
    CHECK_THROWS_AS(drop_attack(in, spec), OutOfRange);
    spec.length = 11;
    CHECK_THROWS_AS(drop_attack(in, spec), OutOfRange);
}

TEST_CASE("apply_attack dispatches and instances accumulate") {
    auto in = LabeledStream::clean(regular_stream(60));
    AttackSpec a;
    a.kind = AttackKind::MasqueradeReplay;
    a.id = in.stream.id;
    a.start_index = 10;
    a.length = 5;
    auto once = apply_attack(in, a);
    AttackSpec b;
    b.kind = AttackKind::Drop;
    b.id = in.stream.id;
    b.start_index = 30;
    b.length = 2;
    auto twice = apply_attack(once, b);
    CHECK(twice.labels[10].instance == 1);
    CHECK(twice.labels[30].kind == AttackKind::Drop);
    CHECK(twice.labels[30].instance == 2);
}

TEST_CASE("manifest round-trip") {
    std::vector<AttackSpec> specs;
    AttackSpec a;
    a.kind = AttackKind::InjectReplay;
    a.id = 0x1F7;
    a.start_index = 100;
    a.length = 25;
    a.seed = 7;
    specs.push_back(a);
    AttackSpec b;
    b.kind = AttackKind::MasqueradeSeamless;
    b.id = 0x0DE;
    b.start_index = 500;
    b.length = 25;
    b.seed = 8;
    b.target_signal = 2;
    specs.push_back(b);

    auto text = serialize_manifest(specs);
    auto back = parse_manifest(text);
    REQUIRE(back.size() == 2);
    CHECK(back[0].kind == AttackKind::InjectReplay);
    CHECK(back[0].id == 0x1F7);
    CHECK(back[0].start_index == 100);
    CHECK(back[0].length == 25);
    CHECK(back[0].seed == 7);
    CHECK(!back[0].target_signal);
    CHECK(back[1].kind == AttackKind::MasqueradeSeamless);
    REQUIRE(back[1].target_signal);
    CHECK(*back[1].target_signal == 2);

    CHECK_THROWS_AS(parse_manifest("bogus,100,0,25,1\n"), MalformedLine);
    CHECK_THROWS_AS(parse_manifest("drop,ZZZ,0,25,1\n"), InvalidId);
    CHECK_THROWS_AS(parse_manifest("drop,100,0,25\n"), MalformedLine);
    CHECK_THROWS_AS(parse_manifest("none,100,0,25,1\n"), MalformedLine);
}

TEST_CASE("label sidecar round-trip reconstructs instances from contiguity") {
    std::vector<FrameLabel> labels(10);
    labels[2] = {AttackKind::Drop, 1};
    labels[5] = {AttackKind::InjectReplay, 2};
    labels[6] = {AttackKind::InjectReplay, 2};
    labels[8] = {AttackKind::InjectReplay, 3};

    auto text = serialize_labels(labels);
    auto back = parse_labels(text);
    REQUIRE(back.size() == 10);
    CHECK(back[2].kind == AttackKind::Drop);
    CHECK(back[2].instance == 1);
    CHECK(back[5].instance == 2);
    CHECK(back[6].instance == 2);
    CHECK(back[8].instance == 3);  // separated by a clean frame -> new instance
    CHECK(back[0].kind == AttackKind::None);
    CHECK_THROWS_AS(parse_labels("weird\n"), MalformedLine);
}
