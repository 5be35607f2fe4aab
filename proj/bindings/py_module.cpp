#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dyrep/checkpoint.hpp"
#include "dyrep/rep_algebra.hpp"
#include "dyrep/runner.hpp"

namespace py = pybind11;
using namespace dyrep;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Tensor<double> t;
  t.shape.assign(a.shape(), a.shape() + a.ndim());
  t.data.assign(a.data(), a.data() + a.size());
  require(!t.shape.empty(), "expected a non-empty array");
  return t;
}

Array from_tensor(const Tensor<double>& t) {
  Array a(t.shape);
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

ConvParams<double> conv_from(const Array& weight, const py::object& bias, int stride, int pad_h,
                             int pad_w) {
  ConvParams<double> p;
  p.weight = to_tensor(weight);
  require(p.weight.ndim() == 4, "conv weight must be [out,in,kh,kw]");
  p.stride = stride;
  p.pad_h = pad_h;
  p.pad_w = pad_w;
  if (!bias.is_none()) {
    p.bias = to_tensor(bias.cast<Array>());
    p.has_bias = true;
  } else {
    p.bias = Tensor<double>({p.out_channels()});
  }
  p.validate();
  return p;
}

py::tuple conv_out(const ConvParams<double>& c) {
  return py::make_tuple(from_tensor(c.weight),
                        c.has_bias ? py::object(from_tensor(c.bias)) : py::none());
}

BnParams<double> bn_from(const Array& gamma, const Array& beta, const Array& mean,
                         const Array& var, double eps) {
  BnParams<double> bn;
  bn.gamma = to_tensor(gamma);
  bn.beta = to_tensor(beta);
  bn.running_mean = to_tensor(mean);
  bn.running_var = to_tensor(var);
  bn.eps = eps;
  bn.validate();
  return bn;
}

}  // namespace

PYBIND11_MODULE(_dyrep, m) {
  m.doc() = "DyRep: dynamic structural re-parameterization (C++ core)";
  m.attr("__version__") = "0.1.0";

  m.def(
      "conv2d",
      [](const Array& input, const Array& weight, const py::object& bias, int stride, int pad_h,
         int pad_w) {
        return from_tensor(conv2d_forward(to_tensor(input), conv_from(weight, bias, stride,
                                                                      pad_h, pad_w)));
      },
      py::arg("input"), py::arg("weight"), py::arg("bias") = py::none(), py::arg("stride") = 1,
      py::arg("pad_h") = 0, py::arg("pad_w") = 0,
      "Direct NCHW convolution with symmetric zero padding.");

  m.def(
      "avgpool2d",
      [](const Array& input, int k, int stride, int pad) {
        return from_tensor(avgpool2d_forward(to_tensor(input), AvgPoolSpec{k, stride, pad}));
      },
      py::arg("input"), py::arg("k"), py::arg("stride") = 1, py::arg("pad") = 0,
      "KxK average pooling (padded cells count toward the K*K divisor).");

  m.def(
      "batchnorm_eval",
      [](const Array& input, const Array& gamma, const Array& beta, const Array& mean,
         const Array& var, double eps) {
        BnParams<double> bn = bn_from(gamma, beta, mean, var, eps);
        return from_tensor(batchnorm_forward(to_tensor(input), bn, BnMode::Eval).out);
      },
      py::arg("input"), py::arg("gamma"), py::arg("beta"), py::arg("running_mean"),
      py::arg("running_var"), py::arg("eps") = 1e-5,
      "Eval-mode batch normalization (running statistics).");

  m.def(
      "fuse_conv_bn",
      [](const Array& weight, const py::object& bias, const Array& gamma, const Array& beta,
         const Array& mean, const Array& var, double eps) {
        ConvParams<double> conv = conv_from(weight, bias, 1, 0, 0);
        return conv_out(fuse_conv_bn(conv, bn_from(gamma, beta, mean, var, eps)));
      },
      py::arg("weight"), py::arg("bias"), py::arg("gamma"), py::arg("beta"),
      py::arg("running_mean"), py::arg("running_var"), py::arg("eps") = 1e-5,
      "Folds an eval-mode BN into the conv; returns (weight, bias).");

  m.def(
      "merge_parallel",
      [](const std::vector<std::pair<Array, py::object>>& convs, int target_k) {
        std::vector<ConvParams<double>> parts;
        for (const auto& [w, b] : convs) {
          ConvParams<double> c = conv_from(w, b, 1, 0, 0);
          c.pad_h = (c.kh() - 1) / 2;
          c.pad_w = (c.kw() - 1) / 2;
          parts.push_back(pad_kernel_to(c, target_k));
        }
        return conv_out(merge_parallel(parts, target_k));
      },
      py::arg("convs"), py::arg("target_k"),
      "Sums parallel conv branches after centered zero-padding to target_k.");

  m.def(
      "merge_sequential",
      [](const Array& w1, const py::object& b1, const Array& w2, const py::object& b2) {
        return conv_out(merge_sequential(conv_from(w1, b1, 1, 0, 0), conv_from(w2, b2, 1, 0, 0)));
      },
      py::arg("weight_1x1"), py::arg("bias_1x1"), py::arg("weight_kxk"), py::arg("bias_kxk"),
      "Merges a 1x1 conv followed by a KxK conv into one KxK conv.");

  m.def(
      "avgpool_to_conv",
      [](int channels, int k, int stride, int pad) {
        return from_tensor(avgpool_to_conv<double>(channels, k, stride, pad).weight);
      },
      py::arg("channels"), py::arg("k"), py::arg("stride") = 1, py::arg("pad") = 0,
      "The fixed 1/K^2 kernel equivalent to average pooling.");

  m.def(
      "identity_to_conv",
      [](int channels, int target_k) {
        return from_tensor(identity_to_conv<double>(channels, target_k).weight);
      },
      py::arg("channels"), py::arg("target_k"),
      "Identity shortcut as a KxK conv kernel.");

  m.def(
      "train_run",
      [](const std::string& config_text, const std::string& run_dir) {
        ResolvedConfig cfg = resolve_config(FlatConfig::parse_text(config_text));
        RunSummary s = run_train(cfg, run_dir);
        py::dict out;
        out["run_dir"] = s.run_dir;
        out["final_train_loss"] = s.final_train_loss;
        out["final_eval_acc"] = s.final_eval_acc;
        out["final_params"] = s.final_params;
        out["epochs"] = s.result.epochs.size();
        out["structural_events"] = s.result.events.size();
        return out;
      },
      py::arg("config_text"), py::arg("run_dir"),
      "Trains per a flat key=value config and writes the run directory.");

  m.def(
      "export_model",
      [](const std::string& checkpoint, const std::string& out) { run_export(checkpoint, out); },
      py::arg("checkpoint"), py::arg("out"),
      "Deploys a checkpoint back to the original topology and writes the model file.");

  m.def(
      "verify_checkpoint",
      [](const std::string& checkpoint) {
        VerifyReport rep = run_verify(checkpoint);
        py::dict out;
        out["pass"] = rep.pass;
        out["tolerance"] = rep.tolerance;
        py::list blocks;
        for (const auto& b : rep.blocks) {
          py::dict e;
          e["id"] = b.id;
          e["deviation"] = b.deviation;
          blocks.append(e);
        }
        out["blocks"] = blocks;
        return out;
      },
      py::arg("checkpoint"),
      "Collapse-equivalence check of every live block in a checkpoint.");

  m.def(
      "score_report",
      [](const std::string& run_dir) { return run_score_report(run_dir); },
      py::arg("run_dir"), "Plain-text table of per-interval saliency scores.");
}
