#include "cassle/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "cassle/sha256.hpp"

namespace cassle {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(uint8_t(bits >> (8 * i)));
}

struct Reader {
  const std::vector<uint8_t>& buf;
  size_t at = 0;

  void need(size_t n) const {
    if (at + n > buf.size()) throw format_error("checkpoint truncated");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(buf[at]) | uint16_t(buf[at + 1]) << 8;
    at += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(buf[at + size_t(i)]) << (8 * i);
    at += 4;
    return v;
  }
  uint8_t u8() {
    need(1);
    return buf[at++];
  }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= uint64_t(buf[at + size_t(i)]) << (8 * i);
    at += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + at), n);
    at += n;
    return s;
  }
};

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path);
}

}  // namespace

std::vector<uint8_t> serialize_params(const std::vector<const Param*>& params) {
  std::vector<uint8_t> out;
  for (const Param* p : params) {
    if (p->name.size() > 0xffff) throw format_error("parameter name too long");
    put_u16(out, uint16_t(p->name.size()));
    out.insert(out.end(), p->name.begin(), p->name.end());
    out.push_back(uint8_t(p->shape.size()));
    for (Index e : p->shape) put_u32(out, uint32_t(e));
    for (Index i = 0; i < p->value.size(); ++i) put_f64(out, p->value[i]);
  }
  return out;
}

std::string params_digest(const std::vector<const Param*>& params) {
  const std::vector<uint8_t> payload = serialize_params(params);
  return sha256_hex(payload);
}

std::string encoder_digest(const EncoderState& enc) { return params_digest(enc.params()); }

void write_checkpoint(const std::string& path, const EncoderState& enc) {
  const auto params = enc.params();
  std::vector<uint8_t> bytes;
  bytes.push_back('C');
  bytes.push_back('S');
  bytes.push_back('L');
  bytes.push_back('E');
  put_u32(bytes, kCheckpointVersion);
  put_u32(bytes, uint32_t(params.size()));
  const auto payload = serialize_params(params);
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  write_file(path, bytes);
}

std::vector<Param> read_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  Reader r{bytes};
  if (r.str(4) != "CSLE") throw format_error("bad checkpoint magic");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw format_error("unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = r.u32();
  std::vector<Param> params;
  params.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Param p;
    const uint16_t name_len = r.u16();
    p.name = r.str(name_len);
    const uint8_t rank = r.u8();
    p.shape.resize(rank);
    for (uint8_t d = 0; d < rank; ++d) p.shape[d] = static_cast<Index>(r.u32());
    const Index n = numel(p.shape);
    p.value.resize(n);
    for (Index j = 0; j < n; ++j) p.value[j] = r.f64();
    params.push_back(std::move(p));
  }
  if (r.at != bytes.size()) throw format_error("trailing bytes in checkpoint");
  return params;
}

void load_checkpoint(const std::string& path, EncoderState& enc) {
  const auto stored = read_checkpoint(path);
  auto live = enc.params();
  if (stored.size() != live.size())
    throw format_error("checkpoint parameter count mismatch");
  for (size_t i = 0; i < live.size(); ++i) {
    if (stored[i].name != live[i]->name)
      throw format_error("checkpoint parameter order mismatch at " + stored[i].name);
    if (stored[i].shape != live[i]->shape)
      throw format_error("checkpoint shape mismatch for " + stored[i].name);
    live[i]->value = stored[i].value;
  }
}

EncoderState encoder_from_checkpoint(const std::string& path) {
  const auto stored = read_checkpoint(path);
  ArchSpec arch;
  arch.backbone.clear();
  arch.projector.clear();
  bool with_head = false;
  bool saw_input = false;
  for (const Param& p : stored) {
    const bool is_weight = p.shape.size() == 2 && p.name.size() > 2 &&
                           p.name.substr(p.name.size() - 2) == ".W";
    if (is_weight && p.name.rfind("backbone.", 0) == 0) {
      if (!saw_input) {
        arch.input_dim = p.shape[0];
        saw_input = true;
      }
      arch.backbone.push_back(p.shape[1]);
    } else if (is_weight && p.name.rfind("projector.", 0) == 0) {
      arch.projector.push_back(p.shape[1]);
    } else if (p.name == "head.0.W" && p.shape.size() == 2) {
      with_head = true;
      arch.head_hidden = p.shape[1];
    } else if (p.name.rfind("head.", 0) == 0) {
      with_head = true;
    } else if (p.name == "prototypes" && p.shape.size() == 2) {
      arch.prototypes = p.shape[0];
    }
  }
  if (!saw_input || arch.backbone.empty() || arch.projector.empty())
    throw format_error("checkpoint does not describe a full encoder");
  EncoderState enc = init_encoder(arch, 0, with_head);
  load_checkpoint(path, enc);
  return enc;
}

void write_feature_dump(const std::string& path, const MatrixRM& features,
                        const std::vector<uint32_t>& labels) {
  if (static_cast<Index>(labels.size()) != features.rows())
    throw shape_error("feature dump: label count != row count");
  std::vector<uint8_t> bytes;
  bytes.push_back('C');
  bytes.push_back('S');
  bytes.push_back('F');
  bytes.push_back('E');
  put_u32(bytes, uint32_t(features.rows()));
  put_u32(bytes, uint32_t(features.cols()));
  for (Index i = 0; i < features.rows(); ++i)
    for (Index j = 0; j < features.cols(); ++j) put_f64(bytes, features(i, j));
  for (uint32_t label : labels) put_u32(bytes, label);
  write_file(path, bytes);
}

FeatureDump read_feature_dump(const std::string& path) {
  const auto bytes = read_file(path);
  Reader r{bytes};
  if (r.str(4) != "CSFE") throw format_error("bad feature dump magic");
  const uint32_t count = r.u32();
  const uint32_t dim = r.u32();
  FeatureDump dump;
  dump.features.resize(count, dim);
  for (uint32_t i = 0; i < count; ++i)
    for (uint32_t j = 0; j < dim; ++j) dump.features(i, j) = r.f64();
  dump.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) dump.labels[i] = r.u32();
  if (r.at != bytes.size()) throw format_error("trailing bytes in feature dump");
  return dump;
}

}  // namespace cassle
