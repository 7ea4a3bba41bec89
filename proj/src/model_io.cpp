#include "triflow/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace triflow {

namespace {

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

void put_f64le(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
}

double get_f64le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

void append_array(std::string& out, const double* data, Index n) {
  for (Index i = 0; i < n; ++i) put_f64le(out, data[i]);
}

const unsigned char* read_array(const unsigned char* p, double* data, Index n) {
  for (Index i = 0; i < n; ++i, p += 8) data[i] = get_f64le(p);
  return p;
}

std::string flags_to_string(const std::vector<bool>& flags) {
  std::string s;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (i > 0) s += ',';
    s += flags[i] ? '1' : '0';
  }
  return s;
}

std::vector<bool> flags_from_string(const std::string& s, Index expect) {
  std::vector<bool> flags;
  for (char c : s) {
    if (c == ',') continue;
    if (c == '0') {
      flags.push_back(false);
    } else if (c == '1') {
      flags.push_back(true);
    } else {
      throw FormatError("model header: bad flip_after entry '" +
                        std::string(1, c) + "'");
    }
  }
  if (static_cast<Index>(flags.size()) != expect) {
    throw FormatError("model header: flip_after has " +
                      std::to_string(flags.size()) + " entries, expected " +
                      std::to_string(expect));
  }
  return flags;
}

Index header_index(const HeaderMap& h, const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw FormatError("model header: missing key " + key);
  try {
    return static_cast<Index>(std::stoll(it->second));
  } catch (const std::exception&) {
    throw FormatError("model header: non-integer value for " + key);
  }
}

}  // namespace

void save_model(const std::string& path, const FlowModel& model,
                const HeaderMap& metadata) {
  if (model.layers.empty()) throw ConfigError("save_model: empty model");
  const Index N = model.n_dim();
  const Index B = model.layers.front().block_size;

  HeaderMap header = metadata;
  header["n_dim"] = std::to_string(N);
  header["block_size"] = std::to_string(B);
  header["n_layers"] = std::to_string(model.n_layers());
  header["nonlinearity"] = to_string(model.layers.front().nonlinearity);
  header["flip_after"] = flags_to_string(model.flip_after);
  header["norm_absorbed"] = model.norm_absorbed ? "1" : "0";

  std::string header_text;
  for (const auto& [k, v] : header) {
    header_text += k;
    header_text += '=';
    header_text += v;
    header_text += '\n';
  }

  std::string out;
  out.append(kModelMagic, 4);
  put_u32le(out, kModelVersion);
  put_u32le(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  for (const TriUnit& t : model.layers) {
    append_array(out, t.packed.data(), t.packed.size());
    append_array(out, t.v_diag_raw.data(), t.v_diag_raw.size());
    append_array(out, t.a.data(), t.a.size());
    append_array(out, t.b.data(), t.b.size());
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

FlowModel load_model(const std::string& path, HeaderMap* header_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string raw = std::move(ss).str();
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());

  if (raw.size() < 12) throw FormatError("'" + path + "': truncated model file");
  if (std::memcmp(raw.data(), kModelMagic, 4) != 0) {
    throw FormatError("'" + path + "': bad magic, expected TRIN, found '" +
                      raw.substr(0, 4) + "'");
  }
  const std::uint32_t version = get_u32le(p + 4);
  if (version != kModelVersion) {
    throw FormatError("'" + path + "': unsupported version " +
                      std::to_string(version));
  }
  const std::uint32_t header_len = get_u32le(p + 8);
  if (raw.size() < 12 + std::size_t(header_len)) {
    throw FormatError("'" + path + "': truncated header");
  }

  HeaderMap header;
  {
    std::istringstream hs(raw.substr(12, header_len));
    std::string line;
    while (std::getline(hs, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw FormatError("'" + path + "': malformed header line '" + line + "'");
      }
      header[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  const Index N = header_index(header, "n_dim");
  const Index B = header_index(header, "block_size");
  const Index L = header_index(header, "n_layers");
  if (N < 1 || B < 1 || L < 1) {
    throw FormatError("'" + path + "': non-positive model dimensions");
  }
  auto kind_it = header.find("nonlinearity");
  if (kind_it == header.end()) {
    throw FormatError("'" + path + "': missing nonlinearity");
  }
  Nonlinearity kind;
  try {
    kind = parse_nonlinearity(kind_it->second);
  } catch (const ConfigError& e) {
    throw FormatError("'" + path + "': " + e.what());
  }

  const Index per_layer = stored_float_count(N, B);
  const std::size_t expect = 12 + std::size_t(header_len) +
                             std::size_t(8) * std::size_t(L) *
                                 std::size_t(per_layer);
  if (raw.size() != expect) {
    throw FormatError("'" + path + "': payload is " +
                      std::to_string(raw.size() - 12 - header_len) +
                      " bytes, expected " +
                      std::to_string(std::size_t(8) * L * per_layer));
  }

  FlowModel model;
  auto flip_it = header.find("flip_after");
  if (flip_it == header.end()) {
    throw FormatError("'" + path + "': missing flip_after");
  }
  model.flip_after = flags_from_string(flip_it->second, L);
  model.norm_absorbed = header.count("norm_absorbed") != 0 &&
                        header.at("norm_absorbed") == "1";

  const unsigned char* cur = p + 12 + header_len;
  model.layers.resize(static_cast<std::size_t>(L));
  for (TriUnit& t : model.layers) {
    t.n_dim = N;
    t.block_size = B;
    t.nonlinearity = kind;
    t.packed.resize(N * B, N);
    t.v_diag_raw.resize(N * B);
    t.a.resize(N * B);
    t.b.resize(N);
    cur = read_array(cur, t.packed.data(), t.packed.size());
    cur = read_array(cur, t.v_diag_raw.data(), t.v_diag_raw.size());
    cur = read_array(cur, t.a.data(), t.a.size());
    cur = read_array(cur, t.b.data(), t.b.size());
  }

  if (header_out != nullptr) *header_out = std::move(header);
  return model;
}

}  // namespace triflow
