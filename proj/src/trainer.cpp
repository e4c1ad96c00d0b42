#include "czsl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "czsl/error.hpp"
#include "czsl/rng.hpp"

namespace czsl {

TunableMask TunableMask::all_tokens(const CompositionSpace& space) {
  return {std::vector<bool>(static_cast<std::size_t>(space.num_attributes()), true),
          std::vector<bool>(static_cast<std::size_t>(space.num_objects()), true), false};
}

TunableMask TunableMask::subset_tokens(const CompositionSpace& space,
                                       std::span<const Composition> compositions) {
  TunableMask m = prompts_only(space);
  for (const auto& c : compositions) {
    m.attributes[static_cast<std::size_t>(c.attribute)] = true;
    m.objects[static_cast<std::size_t>(c.object)] = true;
  }
  m.prompts = false;
  return m;
}

TunableMask TunableMask::prompts_only(const CompositionSpace& space) {
  return {std::vector<bool>(static_cast<std::size_t>(space.num_attributes()), false),
          std::vector<bool>(static_cast<std::size_t>(space.num_objects()), false), true};
}

Eigen::Index TunableMask::tunable_count(const Detector& detector) const {
  const Eigen::Index d = detector.frozen.dim;
  Eigen::Index n = d * (std::count(attributes.begin(), attributes.end(), true) +
                        std::count(objects.begin(), objects.end(), true));
  if (prompts) {
    for (const auto& p : detector.prompts) n += p.tokens.size();
  }
  return n;
}

LossConfig LossConfig::csp_baseline() { return from_toggles(false, false, false); }

LossConfig LossConfig::full_ca() { return from_toggles(true, true, true); }

LossConfig LossConfig::from_toggles(bool smoothing, bool separation, bool decorrelation) {
  LossConfig c;
  c.policy.mode = smoothing ? SmoothingMode::compositional : SmoothingMode::none;
  c.separation = separation;
  c.decorrelation = decorrelation;
  return c;
}

SeparationWeights LossConfig::effective_weights() const {
  SeparationWeights w = weights;
  if (!separation) w.distance = w.attribute = w.object = 0.0;
  if (!decorrelation) w.hsic = 0.0;
  return w;
}

nlohmann::json LossConfig::to_json() const {
  return {{"mode", to_string(policy.mode)},
          {"policy",
           {{"p_C", policy.p_composition},
            {"p_O", policy.p_object},
            {"p_A", policy.p_attribute},
            {"epsilon", policy.epsilon}}},
          {"weights",
           {{"lambda1", weights.distance},
            {"lambda2", weights.attribute},
            {"lambda3", weights.object},
            {"lambda_h", weights.hsic}}},
          {"separation", separation},
          {"decorrelation", decorrelation},
          {"kernel", kernel.type == Kernel::Type::linear ? "linear" : "gaussian"},
          {"bandwidth", kernel.bandwidth}};
}

LossConfig LossConfig::from_json(const nlohmann::json& doc) {
  LossConfig c;
  try {
    if (doc.contains("mode")) c.policy.mode = parse_smoothing_mode(doc.at("mode"));
    if (doc.contains("policy")) {
      const auto& p = doc.at("policy");
      c.policy.p_composition = p.value("p_C", c.policy.p_composition);
      c.policy.p_object = p.value("p_O", c.policy.p_object);
      c.policy.p_attribute = p.value("p_A", c.policy.p_attribute);
      c.policy.epsilon = p.value("epsilon", c.policy.epsilon);
    }
    if (doc.contains("weights")) {
      const auto& w = doc.at("weights");
      c.weights.distance = w.value("lambda1", c.weights.distance);
      c.weights.attribute = w.value("lambda2", c.weights.attribute);
      c.weights.object = w.value("lambda3", c.weights.object);
      c.weights.hsic = w.value("lambda_h", c.weights.hsic);
    }
    c.separation = doc.value("separation", c.separation);
    c.decorrelation = doc.value("decorrelation", c.decorrelation);
    const std::string kernel = doc.value("kernel", std::string("linear"));
    if (kernel == "gaussian") {
      c.kernel = Kernel::gaussian(doc.value("bandwidth", 0.0));
    } else if (kernel != "linear") {
      throw ValidationError("unknown kernel '" + kernel + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed loss config: ") + e.what());
  }
  c.policy.validate();
  c.weights.validate();
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
  if (!(prompt_learning_rate > 0.0)) throw ValidationError("prompt learning rate must be > 0");
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (background_ratio < 0) throw ValidationError("background ratio must be >= 0");
  loss.policy.validate();
  loss.weights.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"prompt_learning_rate", prompt_learning_rate},
          {"seed", seed},
          {"background_ratio", background_ratio},
          {"match_iou", match_iou},
          {"classes", classes == ClassList::full_space ? "all" : "seen"},
          {"loss", loss.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  TrainConfig c;
  try {
    c.epochs = doc.value("epochs", c.epochs);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.prompt_learning_rate = doc.value("prompt_learning_rate", c.prompt_learning_rate);
    c.seed = doc.value("seed", c.seed);
    c.background_ratio = doc.value("background_ratio", c.background_ratio);
    c.match_iou = doc.value("match_iou", c.match_iou);
    const std::string classes = doc.value("classes", std::string("all"));
    if (classes == "seen") {
      c.classes = ClassList::seen;
    } else if (classes != "all") {
      throw ValidationError("train.classes must be 'all' or 'seen'");
    }
    if (doc.contains("loss")) c.loss = LossConfig::from_json(doc.at("loss"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

RegionMatch match_regions(std::span<const SceneObject> objects, std::span<const Box> proposals,
                          double iou_threshold) {
  RegionMatch match;
  match.labels.assign(proposals.size(), std::nullopt);
  std::vector<bool> taken(proposals.size(), false);
  for (const auto& object : objects) {
    std::optional<std::size_t> best;
    double best_iou = iou_threshold;
    for (std::size_t p = 0; p < proposals.size(); ++p) {
      if (taken[p]) continue;
      const double overlap = iou(object.box, proposals[p]);
      if (overlap >= best_iou && (!best || overlap > best_iou)) {
        best = p;
        best_iou = overlap;
      }
    }
    if (best) {
      taken[*best] = true;
      match.labels[*best] = object.composition;
    }
  }
  return match;
}

namespace {

std::vector<Box> sample_background(const Scene& scene, std::span<const Box> proposals, int count,
                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Box> out;
  const int w = scene.image.width();
  const int h = scene.image.height();
  for (int attempt = 0; attempt < 50 * count && static_cast<int>(out.size()) < count; ++attempt) {
    const double bw = static_cast<double>(rng.uniform_int(16, 40));
    const double bh = static_cast<double>(rng.uniform_int(16, 40));
    const Box box{static_cast<double>(rng.uniform_int(0, w - static_cast<int>(bw))),
                  static_cast<double>(rng.uniform_int(0, h - static_cast<int>(bh))), bw, bh};
    const bool clear =
        std::none_of(scene.objects.begin(), scene.objects.end(),
                     [&](const SceneObject& o) { return iou(o.box, box) >= 0.1; }) &&
        std::none_of(proposals.begin(), proposals.end(),
                     [&](const Box& p) { return iou(p, box) >= 0.1; });
    if (clear) out.push_back(box);
  }
  return out;
}

std::vector<Composition> class_list(const CompositionSpace& space, ClassList mode,
                                    std::span<const Composition> seen) {
  if (mode == ClassList::seen && !seen.empty()) return {seen.begin(), seen.end()};
  return space.compositions();
}

bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

}  // namespace

std::vector<PreparedImage> prepare_training_images(const Dataset& dataset,
                                                   const FrozenModel& frozen,
                                                   int background_ratio, double match_iou,
                                                   std::uint64_t seed) {
  std::vector<PreparedImage> out;
  out.reserve(dataset.scenes.size());
  for (const auto& scene : dataset.scenes) {
    PreparedImage img;
    img.image_id = scene.id;
    const std::vector<Box> proposals = blob_propose(scene.image);
    const RegionMatch match = match_regions(scene.objects, proposals, match_iou);
    img.boxes = proposals;
    img.labels = match.labels;
    const int n_background = background_ratio * static_cast<int>(scene.objects.size());
    const std::uint64_t image_seed =
        Rng::splitmix64(seed ^ (static_cast<std::uint64_t>(scene.id) * 0x9e3779b97f4a7c15ULL) ^
                        dataset.spec.seed);
    for (const Box& b : sample_background(scene, proposals, n_background, image_seed)) {
      img.boxes.push_back(b);
      img.labels.push_back(std::nullopt);
    }
    img.features = frozen.featurizer.features(scene.image, img.boxes);
    for (const auto& o : scene.objects) img.instances.push_back(o.composition);
    out.push_back(std::move(img));
  }
  return out;
}

StepResult compute_step(const Detector& detector, std::span<const Composition> classes,
                        std::span<const PreparedImage* const> batch, const CompositionSpace& space,
                        const LossConfig& loss) {
  Eigen::Index rows = 0;
  for (const auto* img : batch) rows += img->features.rows();
  const int dim = detector.frozen.dim;
  Eigen::MatrixXd features(rows, dim);
  std::vector<std::optional<Composition>> labels;
  std::vector<Composition> instances;
  Eigen::Index r = 0;
  for (const auto* img : batch) {
    features.middleRows(r, img->features.rows()) = img->features;
    r += img->features.rows();
    labels.insert(labels.end(), img->labels.begin(), img->labels.end());
    instances.insert(instances.end(), img->instances.begin(), img->instances.end());
  }

  const Eigen::MatrixXd embeddings = detector.class_embeddings(classes);
  const double tau = detector.frozen.tau;
  const Eigen::MatrixXd logits = region_logits(features, embeddings, tau);
  const Eigen::MatrixXd targets = smooth_targets(space, labels, classes, loss.policy);
  TotalLoss total = total_loss(logits, targets, detector.tokens, instances,
                               loss.effective_weights(), loss.kernel);

  StepResult out;
  out.breakdown = total.breakdown;
  out.gradient.table = std::move(total.table_gradient);
  out.gradient.prompts.reserve(detector.prompts.size());
  for (const auto& p : detector.prompts) {
    out.gradient.prompts.push_back(Eigen::MatrixXd::Zero(p.tokens.rows(), p.tokens.cols()));
  }

  // logits = F E^T / tau, E_k = M mean_k, mean_k = average of the class's tokens.
  const Eigen::MatrixXd grad_embeddings = total.grad_logits.transpose() * features / tau;
  const Eigen::MatrixXd grad_means = grad_embeddings * detector.frozen.compose_map;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const Composition& c = classes[k];
    const auto row = grad_means.row(static_cast<Eigen::Index>(k));
    double count = 2.0;
    std::optional<std::size_t> prompt_index;
    for (std::size_t p = 0; p < detector.prompts.size(); ++p) {
      if (detector.prompts[p].owner == c && detector.prompts[p].tokens.rows() > 0) {
        prompt_index = p;
        count += static_cast<double>(detector.prompts[p].tokens.rows());
      }
    }
    out.gradient.table.attributes.row(c.attribute) += row / count;
    out.gradient.table.objects.row(c.object) += row / count;
    if (prompt_index) {
      out.gradient.prompts[*prompt_index].rowwise() += row / count;
    }
  }
  return out;
}

std::string TrainLog::to_jsonl() const {
  std::ostringstream out;
  for (const auto& e : epochs) {
    nlohmann::json rec = {{"epoch", e.epoch},
                          {"steps", e.steps},
                          {"seed", seed},
                          {"classification", e.mean.classification},
                          {"L_A", e.mean.attribute_orthogonality},
                          {"L_O", e.mean.object_orthogonality},
                          {"L_distance", e.mean.distance},
                          {"L_hsic", e.mean.hsic},
                          {"total", e.mean.total}};
    out << rec.dump() << '\n';
  }
  return out.str();
}

TrainLog train(Detector& detector, const CompositionSpace& space,
               std::span<const PreparedImage> images, const TrainConfig& config,
               std::span<const Composition> seen_compositions) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const TunableMask mask = config.mask.value_or(TunableMask::all_tokens(space));
  if (static_cast<int>(mask.attributes.size()) != space.num_attributes() ||
      static_cast<int>(mask.objects.size()) != space.num_objects()) {
    throw ShapeError("tunable mask does not match the composition space");
  }
  const std::vector<Composition> classes = class_list(space, config.classes, seen_compositions);

  std::vector<const PreparedImage*> order;
  for (const auto& img : images) order.push_back(&img);
  std::sort(order.begin(), order.end(),
            [](const PreparedImage* a, const PreparedImage* b) { return a->image_id < b->image_id; });

  TrainLog log;
  log.seed = config.seed;
  Rng rng(config.seed ^ 0xba7c4ULL);
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      std::vector<const PreparedImage*> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                              order.begin() + static_cast<std::ptrdiff_t>(end));
      // Deterministic accumulation order within the batch.
      std::sort(batch.begin(), batch.end(), [](const PreparedImage* a, const PreparedImage* b) {
        return a->image_id < b->image_id;
      });
      const StepResult result = compute_step(detector, classes, batch, space, config.loss);
      const LossBreakdown& b = result.breakdown;
      const std::pair<const char*, double> terms[] = {
          {"classification", b.classification}, {"L_A", b.attribute_orthogonality},
          {"L_O", b.object_orthogonality},      {"L_distance", b.distance},
          {"L_hsic", b.hsic}};
      for (const auto& [name, value] : terms) {
        if (!std::isfinite(value)) throw TrainingError(name, step);
      }
      if (!all_finite(result.gradient.table.attributes) || !all_finite(result.gradient.table.objects) ||
          !std::all_of(result.gradient.prompts.begin(), result.gradient.prompts.end(), all_finite)) {
        throw TrainingError("gradient", step);
      }

      const double lr = config.learning_rate;
      for (Eigen::Index a = 0; a < detector.tokens.attributes().rows(); ++a) {
        if (mask.attributes[static_cast<std::size_t>(a)]) {
          detector.tokens.attributes().row(a) -= lr * result.gradient.table.attributes.row(a);
        }
      }
      for (Eigen::Index o = 0; o < detector.tokens.objects().rows(); ++o) {
        if (mask.objects[static_cast<std::size_t>(o)]) {
          detector.tokens.objects().row(o) -= lr * result.gradient.table.objects.row(o);
        }
      }
      if (mask.prompts) {
        for (std::size_t p = 0; p < detector.prompts.size(); ++p) {
          detector.prompts[p].tokens -= config.prompt_learning_rate * result.gradient.prompts[p];
        }
      }

      record.mean.classification += b.classification;
      record.mean.attribute_orthogonality += b.attribute_orthogonality;
      record.mean.object_orthogonality += b.object_orthogonality;
      record.mean.distance += b.distance;
      record.mean.hsic += b.hsic;
      ++record.steps;
      ++step;
    }
    if (record.steps > 0) {
      const double n = record.steps;
      record.mean.classification /= n;
      record.mean.attribute_orthogonality /= n;
      record.mean.object_orthogonality /= n;
      record.mean.distance /= n;
      record.mean.hsic /= n;
    }
    record.mean.total = record.mean.sum_of_terms();
    log.epochs.push_back(record);
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

TrainLog train(Detector& detector, const CompositionSpace& space,
               std::span<const Dataset* const> datasets, const TrainConfig& config) {
  if (datasets.empty()) throw ValidationError("training needs at least one dataset");
  std::vector<PreparedImage> images;
  std::vector<Composition> seen;
  int offset = 0;
  for (const Dataset* d : datasets) {
    auto prepared = prepare_training_images(*d, detector.frozen, config.background_ratio,
                                            config.match_iou, config.seed);
    int max_id = 0;
    for (auto& img : prepared) {
      max_id = std::max(max_id, img.image_id);
      img.image_id += offset;
      images.push_back(std::move(img));
    }
    offset += max_id + 1;
    for (const auto& c : d->spec.compositions) {
      if (std::find(seen.begin(), seen.end(), c) == seen.end()) seen.push_back(c);
    }
  }
  if (images.empty()) throw ValidationError("training datasets contain no images");
  return train(detector, space, images, config, seen);
}

EvalSet prepare_eval_set(const Dataset& dataset, const FrozenModel& frozen,
                         const CompositionSpace& space) {
  EvalSet set;
  for (const auto& scene : dataset.scenes) {
    EvalImage img;
    img.image_id = scene.id;
    img.boxes = blob_propose(scene.image);
    img.features = frozen.featurizer.features(scene.image, img.boxes);
    set.images.push_back(std::move(img));
    for (const auto& o : scene.objects) {
      set.ground_truth.push_back({scene.id, o.box, space.id(o.composition)});
    }
  }
  return set;
}

EvalOutcome evaluate(const Detector& detector, const CompositionSpace& space,
                     const EvalSet& eval_set, const SplitSpec& split, const EvalConfig& config) {
  const std::vector<Composition> classes = space.compositions();
  std::vector<int> ids(classes.size());
  std::iota(ids.begin(), ids.end(), 0);
  const Eigen::MatrixXd embeddings = detector.class_embeddings(classes);
  EvalOutcome out;
  std::vector<Detection> survivors;
  for (const auto& img : eval_set.images) {
    if (img.boxes.empty()) continue;
    const Eigen::MatrixXd logits = region_logits(img.features, embeddings, detector.frozen.tau);
    auto dets = detections_from_scores(img.image_id, img.boxes, logits, ids, config.score_threshold);
    auto kept = class_agnostic_nms(dets, config.nms_iou);
    survivors.insert(survivors.end(), kept.begin(), kept.end());
    out.detections.insert(out.detections.end(), dets.begin(), dets.end());
  }
  out.report = nms_map(out.detections, eval_set.ground_truth, split, config);
  out.confusion = confusion_matrix(survivors, eval_set.ground_truth, space.size(), config.confusion_iou);
  return out;
}

}  // namespace czsl
