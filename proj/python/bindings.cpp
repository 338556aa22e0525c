#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "markvqa/dataset.hpp"
#include "markvqa/trainer.hpp"

namespace py = pybind11;
using namespace markvqa;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const U8Array& a) {
    if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected an H x W x 3 uint8 array");
    Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::memcpy(img.pixels.data(), a.data(), img.pixels.size());
    return img;
}

U8Array from_image(const Image& img) {
    U8Array a({img.height, img.width, 3});
    std::memcpy(a.mutable_data(), img.pixels.data(), img.pixels.size());
    return a;
}

Mask to_mask(const U8Array& a) {
    if (a.ndim() != 2) throw ValidationError("expected an H x W mask array");
    Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    const auto* p = a.data();
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = p[i] ? 1 : 0;
    return m;
}

U8Array from_mask(const Mask& m) {
    U8Array a({m.height, m.width});
    std::memcpy(a.mutable_data(), m.bits.data(), m.bits.size());
    return a;
}

F64Array from_mat(const Mat<double>& m) {
    F64Array a({m.rows(), m.cols()});
    std::memcpy(a.mutable_data(), m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return a;
}

F64Array from_mat(const Mat<float>& m) { return from_mat(Mat<double>(m.cast<double>())); }

Mat<double> to_mat(const F64Array& a) {
    if (a.ndim() != 2) throw ValidationError("expected a 2-D array");
    Mat<double> m(a.shape(0), a.shape(1));
    std::memcpy(m.data(), a.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
}

std::string dump(const nlohmann::json& j) { return j.dump(); }

// A float model together with its optimiser state, as saved in checkpoints.
struct Trainer {
    Model<float> model;
    OptimizerState<float> optimizer;
    long iteration = 0;
};

}  // namespace

PYBIND11_MODULE(_markvqa, m) {
    m.doc() = "Marker-prompted visual question answering on synthetic driving scenes.";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    static py::exception<NumericalError> numerical(m, "NumericalError", PyExc_ArithmeticError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const NumericalError& e) {
            py::object err = py::reinterpret_borrow<py::object>(numerical)(e.what());
            err.attr("iteration") = e.iteration();
            PyErr_SetObject(numerical.ptr(), err.ptr());
        }
    });

    py::class_<Point>(m, "Point")
        .def(py::init<double, double>(), py::arg("x"), py::arg("y"))
        .def(py::init([](const py::tuple& t) {
            if (t.size() != 2) throw ValidationError("a point needs two coordinates");
            return Point{t[0].cast<double>(), t[1].cast<double>()};
        }))
        .def_readwrite("x", &Point::x)
        .def_readwrite("y", &Point::y)
        .def("__iter__", [](const Point& p) { return py::iter(py::make_tuple(p.x, p.y)); })
        .def("__eq__", [](const Point& a, const Point& b) { return a == b; })
        .def("__repr__", [](const Point& p) { return "Point" + format_coord(p); });
    py::implicitly_convertible<py::tuple, Point>();

    // --- scenes -------------------------------------------------------------
    py::class_<SceneConfig>(m, "SceneConfig")
        .def(py::init<>())
        .def_readwrite("image_height", &SceneConfig::image_height)
        .def_readwrite("image_width", &SceneConfig::image_width)
        .def_readwrite("num_views", &SceneConfig::num_views)
        .def_readwrite("min_objects", &SceneConfig::min_objects)
        .def_readwrite("max_objects", &SceneConfig::max_objects)
        .def_readwrite("object_classes", &SceneConfig::object_classes)
        .def_readwrite("seed", &SceneConfig::seed)
        .def("validate", &SceneConfig::validate);

    py::enum_<QaKind>(m, "QaKind")
        .value("multi_choice", QaKind::multi_choice)
        .value("yes_no", QaKind::yes_no)
        .value("coordinate", QaKind::coordinate)
        .value("open", QaKind::open);

    py::class_<Detection>(m, "Detection")
        .def(py::init<>())
        .def_property(
            "mask", [](const Detection& d) { return from_mask(d.mask); },
            [](Detection& d, const U8Array& a) { d.mask = to_mask(a); })
        .def_readwrite("class_label", &Detection::class_label)
        .def_readwrite("object_id", &Detection::object_id)
        .def_readwrite("view", &Detection::view);

    py::class_<QARecord>(m, "QARecord")
        .def(py::init<>())
        .def_readwrite("question", &QARecord::question)
        .def_readwrite("answer", &QARecord::answer)
        .def_readwrite("answer_coords", &QARecord::answer_coords)
        .def_readwrite("question_coords", &QARecord::question_coords)
        .def_readwrite("qa_kind", &QARecord::qa_kind)
        .def_readwrite("options", &QARecord::options);

    py::class_<Scene>(m, "Scene")
        .def(py::init<>())
        .def_readwrite("scene_id", &Scene::scene_id)
        .def_property(
            "images",
            [](const Scene& s) {
                py::list out;
                for (const auto& img : s.images) out.append(from_image(img));
                return out;
            },
            [](Scene& s, const std::vector<U8Array>& arrays) {
                s.images.clear();
                for (const auto& a : arrays) s.images.push_back(to_image(a));
            })
        .def_readwrite("detections", &Scene::detections)
        .def_readwrite("qa", &Scene::qa)
        .def_property_readonly("height", &Scene::height)
        .def_property_readonly("width", &Scene::width)
        .def("validate", &Scene::validate);

    m.def("generate_scene", &generate_scene, py::arg("config"), py::arg("scene_seed"));
    m.def("generate_dataset", &generate_dataset, py::arg("config"), py::arg("count"));
    m.def(
        "save_dataset",
        [](const std::vector<Scene>& scenes, const std::filesystem::path& dir) {
            return save_dataset(scenes, dir).scene_count;
        },
        py::arg("scenes"), py::arg("dir"));
    m.def("load_dataset", &load_dataset, py::arg("dir"));
    m.def("split_scenes", &split_scenes, py::arg("scenes"), py::arg("val_fraction"), py::arg("split"));
    m.def("format_coord", &format_coord);

    // --- markers ------------------------------------------------------------
    py::class_<MarkerIndexMap>(m, "MarkerIndexMap")
        .def(py::init<double>(), py::arg("distance_threshold") = kDefaultDistanceThreshold)
        .def("__len__", &MarkerIndexMap::size)
        .def("coords", &MarkerIndexMap::coords)
        .def("detection_count", &MarkerIndexMap::detection_count)
        .def_property_readonly("distance_threshold", &MarkerIndexMap::distance_threshold)
        .def("to_json", [](const MarkerIndexMap& map) { return dump(map.to_json()); })
        .def_static("from_json",
                    [](const std::string& s) { return MarkerIndexMap::from_json(nlohmann::json::parse(s)); });

    m.def("compute_centroid", [](const U8Array& mask) { return compute_centroid(to_mask(mask)); });
    m.def(
        "build_index_map",
        [](const std::vector<Detection>& detections, double d_th) {
            auto built = build_index_map(detections, d_th);
            return py::make_tuple(built.map, built.warnings);
        },
        py::arg("detections"), py::arg("distance_threshold") = kDefaultDistanceThreshold);
    m.def("assign_query_coordinate", &assign_query_coordinate, py::arg("map"), py::arg("coord"),
          py::arg("height") = 0, py::arg("width") = 0, py::arg("view") = 0);
    m.def("index_to_coords", &index_to_coords);
    m.def(
        "render_marker_image",
        [](const U8Array& image, const MarkerIndexMap& map, const std::vector<Detection>& detections, double alpha,
           int view) { return from_image(render_marker_image(to_image(image), map, detections, alpha, view).pixels); },
        py::arg("image"), py::arg("map"), py::arg("detections"), py::arg("alpha") = kDefaultOverlayAlpha,
        py::arg("view") = 0);

    // --- vision -------------------------------------------------------------
    py::class_<EncoderConfig>(m, "EncoderConfig")
        .def(py::init<>())
        .def_readwrite("patch_size", &EncoderConfig::patch_size)
        .def_readwrite("embed_dim", &EncoderConfig::embed_dim)
        .def_readwrite("depth", &EncoderConfig::depth)
        .def_readwrite("heads", &EncoderConfig::heads)
        .def_readwrite("lora_rank", &EncoderConfig::lora_rank)
        .def_readwrite("lora_alpha", &EncoderConfig::lora_alpha)
        .def_readwrite("mlp_ratio", &EncoderConfig::mlp_ratio);

    py::class_<MarkerControlNet<double>>(m, "MarkerControlNet")
        .def(py::init<const EncoderConfig&, int, int, std::uint64_t>(), py::arg("config"), py::arg("height"),
             py::arg("width"), py::arg("seed"))
        .def_property_readonly("grid", [](const MarkerControlNet<double>& n) { return py::make_tuple(n.grid_h(), n.grid_w()); })
        .def("encode", [](MarkerControlNet<double>& n, const U8Array& image) { return from_mat(n.encode(to_image(image)).data); })
        .def("mcnet_forward", [](MarkerControlNet<double>& n, const U8Array& image, const U8Array& marker) {
            return from_mat(n.mcnet_forward(to_image(image), to_image(marker)).data);
        });

    m.def(
        "mask_average_pool",
        [](const F64Array& features, int grid_h, int grid_w, const U8Array& mask) {
            return from_mat(mask_average_pool(FeatureMap<double>{grid_h, grid_w, to_mat(features)}, to_mask(mask)));
        },
        py::arg("features"), py::arg("grid_h"), py::arg("grid_w"), py::arg("mask"));

    // --- metrics ------------------------------------------------------------
    m.def("extract_coords", &extract_coords);
    m.def("match_score", &match_score, py::arg("pred"), py::arg("gt"));
    m.def("normalize_answer", &normalize_answer);
    m.def("accuracy", &accuracy, py::arg("preds"), py::arg("gts"));
    m.def("bleu4", &bleu4, py::arg("pred"), py::arg("refs"));
    m.def(
        "corpus_bleu4",
        [](const std::vector<std::string>& preds, const std::vector<std::vector<std::string>>& refs) {
            if (preds.size() != refs.size()) throw ValidationError("corpus_bleu4: prediction and reference counts differ");
            BleuStats total;
            for (std::size_t i = 0; i < preds.size(); ++i) total += bleu_stats(preds[i], refs[i]);
            return bleu_from_stats(total);
        },
        py::arg("preds"), py::arg("refs"));
    m.def("rouge_l", &rouge_l, py::arg("pred"), py::arg("ref"));
    m.def(
        "evaluate_run",
        [](const std::vector<std::string>& records, const std::vector<Scene>& scenes) {
            std::vector<GenerationRecord> recs;
            for (const auto& r : records) recs.push_back(GenerationRecord::from_json(nlohmann::json::parse(r)));
            return dump(evaluate_run(recs, scenes).to_json());
        },
        py::arg("records"), py::arg("scenes"));

    // --- training -----------------------------------------------------------
    m.def("default_config", [] { return dump(TrainConfig{}.to_json()); });
    m.def("cosine_lr", &cosine_lr);

    py::class_<Trainer>(m, "Trainer")
        .def(py::init([](const std::string& config, const std::vector<Scene>& scenes) {
                 auto t = std::make_unique<Trainer>();
                 t->model = ablation_variant<float>(TrainConfig::from_json(nlohmann::json::parse(config)),
                                                   vocab_for(scenes));
                 return t;
             }),
             py::arg("config"), py::arg("scenes"))
        .def_static(
            "load",
            [](const std::filesystem::path& path) {
                auto loaded = load_checkpoint(path);
                auto t = std::make_unique<Trainer>();
                t->model = std::move(loaded.model);
                t->optimizer = std::move(loaded.optimizer);
                t->iteration = loaded.iteration;
                return t;
            })
        .def_property_readonly("config", [](const Trainer& t) { return dump(t.model.config.to_json()); })
        .def_property_readonly("iteration", [](const Trainer& t) { return t.iteration; })
        .def("trainable_names",
             [](Trainer& t) {
                 std::vector<std::string> out;
                 for (auto* p : t.model.trainable()) out.push_back(p->name);
                 return out;
             })
        .def("tensor", [](Trainer& t, const std::string& name) { return from_mat(t.model.named().at(name)->value); })
        .def(
            "train",
            [](Trainer& t, const std::vector<Scene>& scenes, const std::function<void(long, double, double)>& progress) {
                ProgressFn fn;
                if (progress) {
                    fn = [&](const LossPoint& p) {
                        py::gil_scoped_acquire gil;
                        progress(p.iteration, p.lr, p.loss);
                    };
                }
                TrainResult<float> r;
                {
                    py::gil_scoped_release release;
                    r = train(t.model, scenes, fn);
                }
                t.optimizer = std::move(r.optimizer);
                t.iteration = t.model.config.total_iters;
                std::vector<std::tuple<long, double, double>> curve;
                for (const auto& p : r.curve) curve.emplace_back(p.iteration, p.lr, p.loss);
                return curve;
            },
            py::arg("scenes"), py::arg("progress") = nullptr)
        .def("generate",
             [](Trainer& t, const std::vector<Scene>& scenes) {
                 std::vector<GenerationRecord> recs;
                 {
                     py::gil_scoped_release release;
                     recs = generate_answers(t.model, scenes);
                 }
                 std::vector<std::string> out;
                 for (const auto& r : recs) out.push_back(dump(r.to_json()));
                 return out;
             })
        .def("save", [](Trainer& t, const std::filesystem::path& path) {
            save_checkpoint(path, t.model, t.optimizer, t.iteration);
        });
}
