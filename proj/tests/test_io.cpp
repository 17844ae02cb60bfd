#include "fuseclin/error.hpp"
#include "fuseclin/io.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace fuseclin;

TEST_CASE("csv parsing handles quotes, CRLF and ragged rows") {
    auto t = io::parse_csv("a,b,c\r\n1,\"x,y\",3\r\n\"he said \"\"hi\"\"\",,\n");
    REQUIRE(t.header == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][1] == "x,y");
    CHECK(t.rows[1][0] == "he said \"hi\"");
    CHECK(t.rows[1][2] == "");

    CHECK_THROWS_AS(io::parse_csv("a,b\n1,2,3\n"), DataError);
}

TEST_CASE("csv field quoting round-trips") {
    const std::vector<std::string> fields = {"plain", "with,comma", "with\"quote", ""};
    const auto line = io::csv_line(fields);
    auto back = io::parse_csv("h1,h2,h3,h4\n" + line + "\n");
    CHECK(back.rows.at(0) == fields);
}

TEST_CASE("format_double is shortest round-trip") {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -2.5, 0.0}) {
        const auto s = io::format_double(v);
        CHECK(std::stod(s) == v);
    }
    CHECK(io::format_double(0.1) == "0.1");
    CHECK(io::format_double(2.0) == "2");
}

TEST_CASE("sha256 matches the FIPS 180-2 test vector") {
    CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(io::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("double arrays survive base64 encoding bit for bit") {
    const std::vector<double> v = {0.0, -0.0, 1.5, std::numeric_limits<double>::denorm_min(), -1e308, M_PI};
    const auto back = io::decode_doubles(io::encode_doubles(v));
    REQUIRE(back.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::signbit(back[i]) == std::signbit(v[i]));
    CHECK(back == v);
    CHECK_THROWS(io::decode_doubles("not base64!"));
}

TEST_CASE("atomic writes create parent directories and replace content") {
    const auto dir = std::filesystem::temp_directory_path() / "fuseclin_io_test";
    std::filesystem::remove_all(dir);
    io::write_file_atomic(dir / "a" / "b.txt", "first");
    io::write_file_atomic(dir / "a" / "b.txt", "second");
    CHECK(io::read_file(dir / "a" / "b.txt") == "second");
    CHECK(io::sha256_file(dir / "a" / "b.txt") == io::sha256_hex("second"));
    std::filesystem::remove_all(dir);
    CHECK_THROWS(io::read_file(dir / "missing"));
}
