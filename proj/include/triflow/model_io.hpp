#pragma once

#include <map>
#include <string>

#include "triflow/flow.hpp"

namespace triflow {

// Model file layout:
//   "TRIN" | u32 LE version | u32 LE header length | header text | payload
// The header is key=value lines (n_dim, block_size, n_layers, nonlinearity,
// flip_after, norm_absorbed, seed, plus free-form metadata). The payload is,
// per layer, little-endian float64 arrays in the order packed (N*B*N,
// column-major), v_diag_raw (N*B), a (N*B), b (N). Its byte length must be
// exactly 8*L*(N*B*N + 2*N*B + N).
inline constexpr char kModelMagic[4] = {'T', 'R', 'I', 'N'};
inline constexpr std::uint32_t kModelVersion = 1;

using HeaderMap = std::map<std::string, std::string>;

void save_model(const std::string& path, const FlowModel& model,
                const HeaderMap& metadata = {});

FlowModel load_model(const std::string& path, HeaderMap* header_out = nullptr);

}  // namespace triflow
