#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "ens/graph.hpp"
#include "ens/rng.hpp"
#include "ens/tensor.hpp"

namespace ens {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

// Shared hyperparameters for both block families.
struct ModelDims {
  int heads = 1;
  int gdfn_expand = 2;   // GDFN hidden width factor
  int vssm_expand = 1;   // VSSM inner width factor
  int d_state = 8;       // SSM state dimension
  int ca_reduction = 4;  // squeeze-excite bottleneck factor
};

struct Conv1x1P {
  Tensor w, b;  // (co,ci,1,1), (1,co,1,1)
  void init(int co, int ci, Rng& rng) {
    w = Tensor::uniform_init(co, ci, 1, 1, ci, rng);
    b = Tensor(1, co, 1, 1);
  }
  void visit(const std::string& p, const ParamVisitor& fn) {
    fn(p + "/w", w);
    fn(p + "/b", b);
  }
};

struct DWConv3x3P {
  Tensor w, b;  // (c,1,3,3), (1,c,1,1)
  void init(int c, Rng& rng) {
    w = Tensor::uniform_init(c, 1, 3, 3, 9, rng);
    b = Tensor(1, c, 1, 1);
  }
  void visit(const std::string& p, const ParamVisitor& fn) {
    fn(p + "/w", w);
    fn(p + "/b", b);
  }
};

struct LayerNormP {
  Tensor gamma, beta;  // (1,c,1,1)
  void init(int c) {
    gamma = Tensor::full(1, c, 1, 1, 1.0);
    beta = Tensor(1, c, 1, 1);
  }
  void visit(const std::string& p, const ParamVisitor& fn) {
    fn(p + "/gamma", gamma);
    fn(p + "/beta", beta);
  }
};

// --- Restormer side -------------------------------------------------------

struct MdtaParams {
  int heads = 1;
  Conv1x1P q, k, v, out;
  DWConv3x3P qd, kd, vd;
  Tensor temperature;  // (1,heads,1,1)
  void init(int c, const ModelDims& dims, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

struct GdfnParams {
  Conv1x1P expand_gate, expand_value, out;
  DWConv3x3P dw;
  void init(int c, const ModelDims& dims, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

struct RestormerBlockParams {
  LayerNormP ln1, ln2;
  MdtaParams mdta;
  GdfnParams gdfn;
  void init(int c, const ModelDims& dims, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

// --- Mamba side ------------------------------------------------------------

// One directional scan's state-space parameters.
struct SsmDirParams {
  Tensor a_diag;       // (d_inner, d_state, 1, 1), negative real diagonal
  Conv1x1P b_proj, c_proj;  // d_inner -> d_state, per timestep
  Tensor dt_w, dt_b;   // per-channel step-size projection, (1,d_inner,1,1)
  void init(int d_inner, int d_state, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

struct ChannelAttentionP {
  Conv1x1P down, up;
  void init(int c, const ModelDims& dims, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

struct MambaBlockParams {
  LayerNormP ln;
  Conv1x1P expand, gate, contract;
  DWConv3x3P dw;
  std::array<SsmDirParams, 4> dirs;
  ChannelAttentionP ca;
  Tensor res_scale;  // scalar
  void init(int c, const ModelDims& dims, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

// --- forward ops -----------------------------------------------------------

Value mdta(Graph& g, Value x, MdtaParams& p);
Value gdfn(Graph& g, Value x, GdfnParams& p);
Value restormer_block(Graph& g, Value x, RestormerBlockParams& p);

// Scan directions: row-major forward/reverse, column-major forward/reverse.
enum class ScanDir { RowFwd = 0, RowRev = 1, ColFwd = 2, ColRev = 3 };
Value flatten_scan(Graph& g, Value x, ScanDir dir);     // (n,c,h,w) -> (n,c,1,h*w)
Value unflatten_scan(Graph& g, Value x, ScanDir dir, int h, int w);

Value channel_attention(Graph& g, Value x, ChannelAttentionP& p);
Value vssm(Graph& g, Value x, MambaBlockParams& p);
Value mamba_block(Graph& g, Value x, MambaBlockParams& p);

// --- stage -----------------------------------------------------------------

enum class BlockKind { Teacher, Surrogate };

struct StageVariant {
  BlockKind kind = BlockKind::Teacher;
  std::vector<RestormerBlockParams> teacher_blocks;
  std::vector<MambaBlockParams> surrogate_blocks;

  int block_count() const {
    return kind == BlockKind::Teacher ? static_cast<int>(teacher_blocks.size())
                                      : static_cast<int>(surrogate_blocks.size());
  }
  std::size_t param_count();

  static StageVariant teacher(int count, int c, const ModelDims& dims, Rng& rng);
  static StageVariant surrogate(int count, int c, const ModelDims& dims, Rng& rng);

  void visit(const std::string& p, const ParamVisitor& fn);
  std::vector<Tensor*> params();
};

Value stage_forward(Graph& g, Value x, StageVariant& v);

}  // namespace ens
