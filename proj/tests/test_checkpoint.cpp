#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "ramp/checkpoint.hpp"
#include "ramp/error.hpp"
#include "support.hpp"

using namespace ramp;

namespace {

std::vector<double> all_values(const Decoder& d) {
  std::vector<double> v;
  for (const auto& p : d.parameters()) v.insert(v.end(), p.tensor.data().begin(), p.tensor.data().end());
  return v;
}

std::pair<ErrorKind, std::string> error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return {e.kind(), e.what()};
  }
  FAIL("expected an error");
  return {ErrorKind::contract, ""};
}

// 64-bit FNV-1a, written out from its published constants.
std::uint64_t fnv(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

TEST_CASE("round trip preserves parameters bit for bit") {
  Decoder dec(test::tiny_config(), 21);
  CheckpointData data = checkpoint_of(dec);
  data.metadata["note"] = "hello";
  const std::string bytes = encode_checkpoint(data);

  const CheckpointData back = decode_checkpoint(bytes);
  CHECK(back.metadata.at("note") == "hello");
  CHECK(get_decoder_config(back.metadata) == dec.config());
  const Decoder restored = restore_decoder(back);
  CHECK(all_values(restored) == all_values(dec));
  CHECK(encode_checkpoint(back) == bytes);

  std::vector<int> ids{4, 5, 6};
  InputSequence seq;
  seq.append_tokens(ids);
  const auto a = dec.forward(seq), b = restored.forward(seq);
  CHECK(std::vector<double>(a.logits.data().begin(), a.logits.data().end()) ==
        std::vector<double>(b.logits.data().begin(), b.logits.data().end()));

  const auto path = std::filesystem::temp_directory_path() / "ramp_test.ckpt";
  write_checkpoint(path, data);
  CHECK(all_values(restore_decoder(read_checkpoint(path))) == all_values(dec));
  std::filesystem::remove(path);
}

TEST_CASE("byte layout and checksum") {
  CheckpointData data;
  data.metadata["k"] = "v";
  data.tensors.push_back({"w", Tensor::from_data({1, 2}, {1.5, -2.0})});
  const std::string bytes = encode_checkpoint(data);
  CHECK(bytes.substr(0, 8) == "RAMPCKPT");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 8, 4);
  CHECK(version == kCheckpointVersion);
  // magic, version, 1 meta entry (4+1, 4+1), 1 tensor (4+1, rank, 2 dims, 2 doubles), checksum
  CHECK(bytes.size() == 8 + 4 + 4 + 10 + 4 + 5 + 4 + 16 + 16 + 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  CHECK(stored == fnv(std::string_view(bytes).substr(0, bytes.size() - 8)));
  double first;
  std::memcpy(&first, bytes.data() + bytes.size() - 24, 8);
  CHECK(first == 1.5);
}

TEST_CASE("truncation and corruption are integrity errors") {
  const std::string bytes = encode_checkpoint(checkpoint_of(Decoder(test::tiny_config(), 2)));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK(error_of([&] { decode_checkpoint(bytes.substr(0, cut)); }).first == ErrorKind::integrity);
  }
  std::string flipped = bytes;
  flipped[bytes.size() / 3] ^= 0x10;
  CHECK(error_of([&] { decode_checkpoint(flipped); }).first == ErrorKind::integrity);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK(error_of([&] { decode_checkpoint(magic); }).first == ErrorKind::integrity);
}

TEST_CASE("unknown version names both versions") {
  const std::string bytes = encode_checkpoint(checkpoint_of(Decoder(test::tiny_config(), 3)), 7);
  const auto [kind, what] = error_of([&] { decode_checkpoint(bytes); });
  CHECK(kind == ErrorKind::validation);
  CHECK(what.find('7') != std::string::npos);
  CHECK(what.find(std::to_string(kCheckpointVersion)) != std::string::npos);
}

TEST_CASE("shape mismatch names both shapes and leaves the decoder alone") {
  DecoderConfig wide = test::tiny_config();
  wide.d_ff = 24;
  const CheckpointData other = checkpoint_of(Decoder(wide, 4));
  Decoder dec(test::tiny_config(), 5);
  const auto before = all_values(dec);
  const auto [kind, what] = error_of([&] { load_parameters(dec, other); });
  CHECK(kind == ErrorKind::validation);
  CHECK(what.find("[8x24]") != std::string::npos);
  CHECK(what.find("[8x16]") != std::string::npos);
  CHECK(all_values(dec) == before);

  CheckpointData missing = checkpoint_of(dec);
  missing.tensors.pop_back();
  CHECK(error_of([&] { load_parameters(dec, missing); }).first == ErrorKind::validation);
  CHECK(all_values(dec) == before);
}

TEST_CASE("missing files") {
  CHECK(error_of([] { read_checkpoint("/nonexistent/model.ckpt"); }).first == ErrorKind::io);
}
