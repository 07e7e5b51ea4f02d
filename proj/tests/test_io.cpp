#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <string>

#include <unistd.h>

#include "diagnet/io.hpp"

using namespace diagnet;

namespace {

std::string temp_path(const std::string& stem) {
    return "/tmp/diagnet_io_" + std::to_string(static_cast<long>(getpid())) + "_" + stem;
}

} // namespace

TEST_CASE("g17 formatting round-trips doubles exactly") {
    const double values[] = {0.0,   1.0,    -1.0,          0.1,  1.0 / 3.0,
                             1e300, 1e-300, 0x1.fffp-1022, 2.5e-5};
    for (double v : values) {
        CHECK(parse_double(format_g17(v)) == v);
    }
    CHECK(format_g17(0.5) == "0.5");
    CHECK(format_g17(2.0) == "2");
}

TEST_CASE("scalar parsers reject junk") {
    CHECK(parse_double("-2.5e3") == -2500.0);
    CHECK_THROWS_AS(parse_double(""), std::invalid_argument);
    CHECK_THROWS_AS(parse_double("1.5x"), std::invalid_argument);
    CHECK_THROWS_AS(parse_double("nope"), std::invalid_argument);

    CHECK(parse_int("-42") == -42);
    CHECK_THROWS_AS(parse_int("42.5"), std::invalid_argument);
    CHECK_THROWS_AS(parse_int(""), std::invalid_argument);

    CHECK(parse_u64("18446744073709551615") == 0xffffffffffffffffULL);
    CHECK_THROWS_AS(parse_u64("-1"), std::invalid_argument);
    CHECK_THROWS_AS(parse_u64("12 "), std::invalid_argument);

    CHECK(parse_bool("true"));
    CHECK(parse_bool("1"));
    CHECK(parse_bool("on"));
    CHECK_FALSE(parse_bool("false"));
    CHECK_FALSE(parse_bool("0"));
    CHECK_FALSE(parse_bool("off"));
    CHECK_THROWS_AS(parse_bool("yes"), std::invalid_argument);
}

TEST_CASE("key/value maps preserve order and types") {
    KvMap kv;
    kv.set("name", std::string("run-a"));
    kv.set("count", std::uint64_t{12});
    kv.set("rate", 0.125);
    kv.set("enabled", true);
    kv.set("label", "plain literal"); // must take the string path, not bool

    CHECK(kv.get("name") == "run-a");
    CHECK(kv.get("count") == "12");
    CHECK(kv.get("rate") == "0.125");
    CHECK(kv.get("enabled") == "true");
    CHECK(kv.get("label") == "plain literal");
    CHECK(kv.has("rate"));
    CHECK_FALSE(kv.has("missing"));
    CHECK(kv.get_or("missing", "fallback") == "fallback");
    CHECK_THROWS_WITH(kv.get("missing"), Catch::Matchers::ContainsSubstring("missing"));

    // Insertion order is preserved; updates keep the original slot.
    kv.set("count", std::uint64_t{13});
    REQUIRE(kv.items().size() == 5);
    CHECK(kv.items()[0].first == "name");
    CHECK(kv.items()[1].first == "count");
    CHECK(kv.items()[1].second == "13");
    CHECK(kv.items()[4].first == "label");
}

TEST_CASE("key/value text round-trips and tolerates comments") {
    KvMap kv;
    kv.set("alpha", 1.5);
    kv.set("mode", "soft");
    const std::string text = kv_to_text(kv);
    CHECK(text == "alpha=1.5\nmode=soft\n");

    const KvMap back = parse_kv_text(text);
    CHECK(back.get("alpha") == "1.5");
    CHECK(back.get("mode") == "soft");

    const KvMap commented = parse_kv_text("# leading comment\n\n  alpha = 2 \n# tail\nbeta=x y\n");
    CHECK(commented.get("alpha") == "2");
    CHECK(commented.get("beta") == "x y");

    CHECK_THROWS_WITH(parse_kv_text("alpha=1\nbroken line\n"),
                      Catch::Matchers::ContainsSubstring("line 2"));
    CHECK_THROWS_WITH(parse_kv_text("=1\n"), Catch::Matchers::ContainsSubstring("line 1"));
}

TEST_CASE("text files round-trip binary content") {
    const std::string path = temp_path("blob.bin");
    std::string payload = "first\n";
    payload.push_back('\0');
    payload += "\x01\x02\xff tail";
    write_text_file(path, payload);
    CHECK(read_text_file(path) == payload);
    std::remove(path.c_str());

    CHECK_THROWS_WITH(read_text_file("/nonexistent/dir/file.txt"),
                      Catch::Matchers::ContainsSubstring("/nonexistent/dir/file.txt"));
    CHECK_THROWS_WITH(write_text_file("/nonexistent/dir/file.txt", "x"),
                      Catch::Matchers::ContainsSubstring("/nonexistent/dir/file.txt"));
}

TEST_CASE("binary encoding round-trips through the reader") {
    std::string buf;
    put_u16(buf, 0xabcd);
    put_u32(buf, 0x01020304u);
    put_f64(buf, -0.5);
    put_f64(buf, 1e300);
    buf += "tag";

    // Little-endian layout is pinned: low byte first.
    REQUIRE(buf.size() == 25);
    CHECK(static_cast<unsigned char>(buf[0]) == 0xcd);
    CHECK(static_cast<unsigned char>(buf[1]) == 0xab);
    CHECK(static_cast<unsigned char>(buf[2]) == 0x04);
    CHECK(static_cast<unsigned char>(buf[5]) == 0x01);

    BinReader r(buf, "blob");
    CHECK(r.u16() == 0xabcd);
    CHECK(r.u32() == 0x01020304u);
    CHECK(r.f64() == -0.5);
    CHECK(r.f64() == 1e300);
    CHECK_FALSE(r.at_end());
    CHECK(r.bytes(3) == "tag");
    CHECK(r.at_end());
}

TEST_CASE("binary reader reports truncation with its label and offset") {
    std::string buf;
    put_u32(buf, 7);
    BinReader r(buf, "blob");
    CHECK(r.u32() == 7);
    CHECK_THROWS_WITH(r.u16(), Catch::Matchers::ContainsSubstring("blob") &&
                                   Catch::Matchers::ContainsSubstring("truncated"));

    BinReader r2(buf, "blob");
    CHECK_THROWS_WITH(r2.bytes(5), Catch::Matchers::ContainsSubstring("truncated"));
}
