#include <chrono>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "loopstage/compositor.hpp"
#include "loopstage/error.hpp"
#include "loopstage/project.hpp"
#include "loopstage/session.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace loopstage;

namespace {

const auto g_epoch = std::chrono::steady_clock::now();

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - g_epoch).count();
}

py::object to_python(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_python(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::array_t<std::uint8_t> image_to_array(const Image& image) {
  py::array_t<std::uint8_t> out({image.height(), image.width(), 3});
  std::copy(image.data().begin(), image.data().end(), out.mutable_data());
  return out;
}

Image array_to_image(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InvalidRequest("expected an HxWx3 uint8 array");
  Image image(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), image.data().begin());
  return image;
}

py::dict timeline_to_python(const OutputTimeline& timeline) {
  py::dict out;
  for (const OutputLayer& l : timeline.layers) out[py::str(l.layer_id)] = l.frames;
  return out;
}

OutputTimeline timeline_from_python(const Project& project, const py::dict& d) {
  OutputTimeline timeline;
  for (const LayerSpec& l : project.manifest.layers) {
    if (!d.contains(l.id)) throw InvalidRequest("timeline has no layer '" + l.id + "'");
    timeline.layers.push_back({l.id, l.actor, d[py::str(l.id)].cast<std::vector<int>>()});
  }
  return timeline;
}

const LoadedActor& prepared_actor(const Project& project, const std::string& id) {
  const LoadedActor& a = project.actor(id);
  if (!a.matrix || !a.field) throw InvalidRequest("actor '" + id + "' is not prepared");
  return a;
}

}  // namespace

PYBIND11_MODULE(_loopstage, m) {
  m.doc() = "Interactive video-loop synthesis";
  // Later registrations are tried first, so the base class goes first.
  auto& error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<AssetError>(m, "AssetError", error.ptr());
  py::register_exception<InvalidRequest>(m, "InvalidRequest", error.ptr());

  py::class_<Project, std::shared_ptr<Project>>(m, "Project")
      .def_property_readonly("name", [](const Project& p) { return p.manifest.name; })
      .def_property_readonly("hash", [](const Project& p) { return p.hash; })
      .def_property_readonly("frame_rate", [](const Project& p) { return p.manifest.frame_rate; })
      .def_property_readonly("prepared", &Project::prepared)
      .def_property_readonly("layers",
                             [](const Project& p) {
                               std::vector<std::string> ids;
                               for (const LayerSpec& l : p.manifest.layers) ids.push_back(l.id);
                               return ids;
                             })
      .def_property_readonly("actors",
                             [](const Project& p) {
                               std::vector<std::string> ids;
                               for (const LoadedActor& a : p.actors) ids.push_back(a.spec.id);
                               return ids;
                             })
      .def_property_readonly("manifest", [](const Project& p) { return to_python(manifest_to_json(p.manifest)); })
      .def_property_readonly("background", [](const Project& p) { return image_to_array(p.background); })
      .def("frame_count", [](const Project& p, const std::string& actor) { return p.actor(actor).sequence->frame_count(); })
      .def("actions",
           [](const Project& p, const std::string& actor) {
             std::vector<std::string> ids;
             for (const ActionDef& a : p.actor(actor).spec.actions) ids.push_back(a.id);
             return ids;
           })
      .def("frame",
           [](const Project& p, const std::string& actor, int t) {
             const ActorSequence& seq = *p.actor(actor).sequence;
             if (t < 0 || t >= seq.frame_count()) throw InvalidRequest("frame out of range");
             return image_to_array(seq.frame(t));
           })
      .def("distance_matrix",
           [](const Project& p, const std::string& actor) {
             const DistanceMatrix& d = *prepared_actor(p, actor).matrix;
             py::array_t<float> out({d.size(), d.size()});
             std::copy(d.values().begin(), d.values().end(), out.mutable_data());
             return out;
           })
      .def("action_field", [](const Project& p, const std::string& actor) {
        const ActionVectorField& f = *prepared_actor(p, actor).field;
        py::array_t<double> out({f.frames(), f.actions()});
        for (int t = 0; t < f.frames(); ++t) {
          std::copy(f.row(t).begin(), f.row(t).end(), out.mutable_data(t, 0));
        }
        return out;
      });

  m.def(
      "load_project",
      [](const std::filesystem::path& manifest, bool prepare, int threads) {
        LoadOptions options;
        options.prepare = prepare;
        options.threads = threads;
        py::gil_scoped_release release;
        return load_project(manifest, options);
      },
      py::arg("manifest"), py::arg("prepare") = true, py::arg("threads") = 0,
      "Loads a manifest, computing or reusing cached actor data.");

  py::class_<Session>(m, "Session")
      .def(py::init([](std::shared_ptr<Project> p) { return std::make_unique<Session>(std::move(p)); }),
           py::arg("project"))
      .def_property_readonly("playhead", &Session::playhead)
      .def_property_readonly("synthesized", &Session::synthesized)
      .def_property_readonly("buffered", &Session::buffered)
      .def(
          "advance",
          [](Session& s) {
            const Session::Column c = s.advance();
            return py::make_tuple(c.column, c.frames);
          },
          "Plays one column; returns (column, frame per layer).")
      .def(
          "trigger",
          [](Session& s, const std::string& layer, const std::string& action, std::optional<std::int64_t> ts) {
            return s.trigger(layer, action, ts.value_or(now_ms()));
          },
          py::arg("layer"), py::arg("action"), py::arg("timestamp_ms") = py::none(),
          "Requests an action; returns the first affected column.")
      .def(
          "set_param",
          [](Session& s, const std::string& name, py::object value, std::optional<std::int64_t> ts) {
            return s.set_param(name, from_python(value), ts.value_or(now_ms()));
          },
          py::arg("name"), py::arg("value"), py::arg("timestamp_ms") = py::none())
      .def("recording", [](const Session& s) { return to_python(s.recording().to_json()); })
      .def("played_timeline", [](const Session& s) { return timeline_to_python(s.played_timeline()); });

  m.def(
      "replay_recording",
      [](std::shared_ptr<Project> p, py::object rec) {
        const auto recording = PerformanceRecording::from_json(from_python(rec));
        if (recording.manifest_hash != p->hash) throw InvalidRequest("recording belongs to another manifest");
        return timeline_to_python(replay_recording(p, recording));
      },
      py::arg("project"), py::arg("recording"));

  m.def(
      "resynthesize_recording",
      [](std::shared_ptr<Project> p, py::object rec) {
        const auto recording = PerformanceRecording::from_json(from_python(rec));
        OfflineResult result;
        {
          py::gil_scoped_release release;
          result = resynthesize_recording(p, recording);
        }
        py::dict out;
        out["timeline"] = timeline_to_python(result.timeline);
        out["energy"] = result.energy;
        out["live_energy"] = result.live_energy;
        out["warm_started"] = result.warm_started;
        return out;
      },
      py::arg("project"), py::arg("recording"), "Offline re-synthesis of a live recording.");

  m.def(
      "render_frame",
      [](std::shared_ptr<Project> p, const py::dict& timeline, int column, const std::string& quality) {
        const OutputTimeline t = timeline_from_python(*p, timeline);
        if (column < 0 || column >= t.columns()) throw InvalidRequest("column out of range");
        RenderJob job;
        job.timeline = &t;
        job.background = p->background;
        job.actors = p->layer_actors();
        job.quality = parse_quality(quality);
        job.clone_before_resolve = p->manifest.parameters.clone_before_resolve;
        return image_to_array(render_frame(job, column).image);
      },
      py::arg("project"), py::arg("timeline"), py::arg("column"), py::arg("quality") = "final");

  m.def(
      "control_sequence_triggers",
      [](std::shared_ptr<Project> p, const std::vector<py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>>& frames) {
        std::vector<Image> images;
        for (const auto& f : frames) images.push_back(array_to_image(f));
        PerformanceRecording rec;
        rec.manifest_hash = p->hash;
        rec.columns = static_cast<int>(images.size());
        rec.events = control_sequence_triggers(*p, images);
        return to_python(rec.to_json());
      },
      py::arg("project"), py::arg("control_frames"),
      "Derives a recording from color-coded control frames.");
}
