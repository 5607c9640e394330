#include "ramp/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ramp/binary_io.hpp"
#include "ramp/error.hpp"

namespace ramp {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'M', 'P', 'C', 'K', 'P', 'T'};

int meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) fail(ErrorKind::validation, "checkpoint metadata lacks '" + key + "'");
  try {
    std::size_t used = 0;
    int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::validation, "checkpoint metadata '" + key + "' is not an integer");
  }
}

}  // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

std::string encode_checkpoint(const CheckpointData& data, std::uint32_t version) {
  io::Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(version);
  w.u32(static_cast<std::uint32_t>(data.metadata.size()));
  for (const auto& [k, v] : data.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& t : data.tensors) {
    w.str(t.name);
    const Shape& shape = t.tensor.shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) w.u64(d);
    for (double v : t.tensor.data()) w.f64(v);
  }
  std::string bytes = w.bytes();
  io::Writer tail;
  tail.u64(io::fnv1a(bytes));
  return bytes + tail.bytes();
}

CheckpointData decode_checkpoint(std::string_view bytes, const std::string& source) {
  if (bytes.size() < sizeof kMagic + 4 + 8 ||
      !std::equal(kMagic, kMagic + sizeof kMagic, bytes.begin())) {
    fail(ErrorKind::integrity, source + ": not a checkpoint");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  io::Reader tail(bytes.substr(bytes.size() - 8), source);
  if (tail.u64() != io::fnv1a(body)) fail(ErrorKind::integrity, source + ": checksum mismatch");

  io::Reader r(body, source);
  r.raw(sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::validation, source + ": checkpoint version " + std::to_string(version) +
                                    " unsupported (expected " +
                                    std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData data;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    data.metadata[k] = r.str();
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || count > r.remaining() / d) fail(ErrorKind::integrity, source + ": bad shape");
      count *= d;
    }
    std::vector<double> values(count);
    for (double& v : values) v = r.f64();
    data.tensors.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(values))});
  }
  if (r.remaining() != 0) fail(ErrorKind::integrity, source + ": trailing bytes");
  return data;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = encode_checkpoint(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str(), path.string());
}

void put_decoder_config(std::map<std::string, std::string>& meta, const DecoderConfig& cfg) {
  meta["decoder.n_layers"] = std::to_string(cfg.n_layers);
  meta["decoder.n_heads"] = std::to_string(cfg.n_heads);
  meta["decoder.d_model"] = std::to_string(cfg.d_model);
  meta["decoder.d_ff"] = std::to_string(cfg.d_ff);
  meta["decoder.vocab_size"] = std::to_string(cfg.vocab_size);
  meta["decoder.max_positions"] = std::to_string(cfg.max_positions);
  meta["decoder.summary_token_id"] = std::to_string(cfg.summary_token_id);
  meta["decoder.eos_token_id"] = std::to_string(cfg.eos_token_id);
}

DecoderConfig get_decoder_config(const std::map<std::string, std::string>& meta) {
  DecoderConfig cfg;
  cfg.n_layers = meta_int(meta, "decoder.n_layers");
  cfg.n_heads = meta_int(meta, "decoder.n_heads");
  cfg.d_model = meta_int(meta, "decoder.d_model");
  cfg.d_ff = meta_int(meta, "decoder.d_ff");
  cfg.vocab_size = meta_int(meta, "decoder.vocab_size");
  cfg.max_positions = meta_int(meta, "decoder.max_positions");
  cfg.summary_token_id = meta_int(meta, "decoder.summary_token_id");
  cfg.eos_token_id = meta_int(meta, "decoder.eos_token_id");
  cfg.validate();
  return cfg;
}

CheckpointData checkpoint_of(const Decoder& decoder) {
  CheckpointData data;
  put_decoder_config(data.metadata, decoder.config());
  for (const auto& p : decoder.parameters()) {
    const auto v = p.tensor.data();
    data.tensors.push_back(
        {p.name, Tensor::from_data(p.tensor.shape(), std::vector<double>(v.begin(), v.end()))});
  }
  return data;
}

void load_parameters(Decoder& decoder, const CheckpointData& data) {
  for (const auto& p : decoder.parameters()) {
    const Tensor* stored = data.find(p.name);
    if (stored == nullptr) fail(ErrorKind::validation, "checkpoint lacks parameter '" + p.name + "'");
    if (stored->shape() != p.tensor.shape()) {
      fail(ErrorKind::validation, "parameter '" + p.name + "' has shape " +
                                      shape_string(stored->shape()) + " in the checkpoint but " +
                                      shape_string(p.tensor.shape()) + " in the model");
    }
  }
  for (auto& p : decoder.parameters()) {
    const auto src = data.find(p.name)->data();
    std::copy(src.begin(), src.end(), p.tensor.leaf_data().begin());
  }
}

Decoder restore_decoder(const CheckpointData& data) {
  Decoder decoder(get_decoder_config(data.metadata), 0);
  load_parameters(decoder, data);
  return decoder;
}

}  // namespace ramp
