#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "distillforge/analysis.hpp"
#include "distillforge/compress.hpp"
#include "distillforge/data.hpp"
#include "distillforge/diffusion.hpp"
#include "distillforge/unet.hpp"

namespace py = pybind11;
using namespace distillforge;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<long> shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<long>(a.shape(i)));
    Tensor t(shape, Dtype::F64);
    std::memcpy(t.data<double>(), a.data(), sizeof(double) * static_cast<std::size_t>(t.numel()));
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> a(shape);
    Tensor td = t.cast(Dtype::F64);
    std::memcpy(a.mutable_data(), td.data<double>(),
                sizeof(double) * static_cast<std::size_t>(td.numel()));
    return a;
}

py::dict budget_to_dict(const ParamBudget& budget) {
    py::dict per_stage, fractions;
    for (const auto& [s, sb] : budget.per_stage) {
        py::dict d;
        d["res"] = sb.res;
        d["tx"] = sb.tx;
        d["other"] = sb.other;
        per_stage[stage_name(s)] = d;
    }
    for (const auto& [s, f] : budget.fractions) {
        py::dict d;
        d["res"] = f.res;
        d["tx"] = f.tx;
        d["other"] = f.other;
        fractions[stage_name(s)] = d;
    }
    py::dict out;
    out["total"] = budget.total;
    out["per_stage"] = per_stage;
    out["fractions"] = fractions;
    out["lowest_level_tx_share"] = lowest_level_tx_share(budget);
    return out;
}

}  // namespace

PYBIND11_MODULE(distillforge, m) {
    m.doc() = "U-Net compression, self-attention distillation and analysis toolkit";

    m.def(
        "count_params",
        [](const std::string& config_json) {
            return budget_to_dict(count_params(unet_config_from_json(config_json)));
        },
        py::arg("config_json"),
        "Symbolic parameter budget (total, per-stage res/tx/other, fractions) of a UNet config");

    m.def(
        "compress_config",
        [](const std::string& teacher_json, const std::string& spec_json) {
            UNetConfig teacher = unet_config_from_json(teacher_json);
            CompressionSpec spec = compression_spec_from_json(spec_json);
            return unet_config_to_json(compress_config(teacher, spec));
        },
        py::arg("teacher_json"), py::arg("spec_json"),
        "Derive a student config by block + layer-wise removal");

    m.def(
        "plan_layer_match",
        [](int d_teacher, int d_student, const std::string& strategy) {
            return plan_layer_match(d_teacher, d_student, strategy_from_name(strategy));
        },
        py::arg("d_teacher"), py::arg("d_student"), py::arg("strategy") = "SA-bottom",
        "Teacher layer indices a shallower student mimics (SA-bottom/SA-interleave/SA-up)");

    m.def(
        "plan_feature_match",
        [](const std::string& teacher_json, const std::string& student_json,
           const std::string& recipe, const std::string& strategy) {
            auto plan = plan_feature_match(unet_config_from_json(teacher_json),
                                           unet_config_from_json(student_json), recipe,
                                           strategy_from_name(strategy));
            return match_plan_to_json(plan);
        },
        py::arg("teacher_json"), py::arg("student_json"), py::arg("recipe") = "koala-default",
        py::arg("strategy") = "SA-bottom", "Feature match plan JSON for a named recipe");

    m.def(
        "make_schedule",
        [](long T, double beta_start, double beta_end) {
            auto s = make_schedule(T, beta_start, beta_end);
            py::dict d;
            d["betas"] = py::array_t<double>(py::ssize_t(s.T), s.betas.data());
            d["alpha_bars"] = py::array_t<double>(py::ssize_t(s.T), s.alpha_bars.data());
            d["sigmas"] = py::array_t<double>(py::ssize_t(s.T), s.sigmas.data());
            return d;
        },
        py::arg("T") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
        "Linear-beta discrete diffusion schedule with the derived sigma ladder");

    m.def(
        "attention_pca",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& rows, long k) {
            if (rows.ndim() != 2) throw std::invalid_argument("attention_pca: rows must be 2-D");
            auto pca = attention_pca(tensor_from_array(rows), k);
            return py::make_tuple(array_from_tensor(pca.components), pca.explained_variance,
                                  array_from_tensor(pca.projections));
        },
        py::arg("rows"), py::arg("k") = 3,
        "(components [k,d], explained_variance, projections [n,k]) of attention rows");

    m.def(
        "cross_layer_cosine",
        [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>&
               layers,
           bool normalize_index) {
            std::vector<Tensor> ts;
            for (const auto& l : layers) ts.push_back(tensor_from_array(l));
            auto curve = cross_layer_cosine(ts, normalize_index);
            return py::make_tuple(curve.index, curve.values, curve.zero_norm_warning);
        },
        py::arg("layers"), py::arg("normalize_index") = true,
        "Batch-averaged cosine similarity between consecutive layer outputs");

    m.def(
        "gen_dataset",
        [](long n, long h, long w, std::uint64_t seed) {
            auto data = gen_dataset(n, h, w, seed);
            py::array_t<double> images({py::ssize_t(n), py::ssize_t(3), py::ssize_t(h),
                                        py::ssize_t(w)});
            std::vector<std::string> captions;
            double* dst = images.mutable_data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                for (long j = 0; j < data[i].image.numel(); ++j)
                    dst[static_cast<long>(i) * 3 * h * w + j] = data[i].image.get(j);
                captions.push_back(caption_string(data[i].label));
            }
            return py::make_tuple(images, captions);
        },
        py::arg("n"), py::arg("h") = 32, py::arg("w") = 32, py::arg("seed") = 7,
        "(images [n,3,h,w] in [-1,1], captions) for the procedural shapes set");

    m.def(
        "q_sample",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x0,
           const std::vector<long>& t,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& eps, long T,
           double beta_start, double beta_end) {
            auto schedule = make_schedule(T, beta_start, beta_end);
            return array_from_tensor(
                q_sample(tensor_from_array(x0), t, tensor_from_array(eps), schedule));
        },
        py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("T") = 1000,
        py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
        "Forward noising x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps");

    m.attr("__version__") = "0.1.0";
}
