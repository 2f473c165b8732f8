#pragma once

// Training loop: stochastic gradient descent with classical momentum and
// decoupled weight decay, cosine learning-rate decay, per-epoch validation,
// CSV logging, and checkpointing (latest every epoch, plus the best
// validation-mIoU epoch). Deterministic for a fixed (seed, threads) pair:
// batch order, augmentation, and initialization all derive from the config
// seed, and the optional thread sharding combines shard results in fixed
// thread order.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "hcmamba/checkpoint.hpp"
#include "hcmamba/config.hpp"
#include "hcmamba/data.hpp"
#include "hcmamba/errors.hpp"
#include "hcmamba/loss_metrics.hpp"
#include "hcmamba/model.hpp"
#include "hcmamba/tensor.hpp"

namespace hcm {

// Cosine decay from lr_start (epoch 0) to lr_end (last epoch).
inline double cosine_lr(int64_t epoch, int64_t total_epochs, double lr_start, double lr_end) {
  if (total_epochs < 1) throw ContractError("cosine_lr: total_epochs must be >= 1");
  if (epoch < 0 || epoch >= total_epochs)
    throw ContractError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(total_epochs) + ")");
  if (total_epochs == 1) return lr_start;
  double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(t * 3.14159265358979323846));
}

// One SGDW update: v <- momentum*v + g, then p <- p - lr*v - lr*wd*p using
// the pre-step p for the decay term (decay is decoupled from the gradient
// path, so it never enters the velocity).
template <typename T>
void sgdw_update(T* param, T* velocity, const T* grad, size_t n, double lr, double momentum,
                 double weight_decay) {
  for (size_t i = 0; i < n; ++i) {
    T p0 = param[i];
    velocity[i] = static_cast<T>(momentum) * velocity[i] + grad[i];
    param[i] = p0 - static_cast<T>(lr) * velocity[i] -
               static_cast<T>(lr) * static_cast<T>(weight_decay) * p0;
  }
}

struct EpochStats {
  int64_t epoch = 0;
  double train_loss = 0;
  double val_miou = 0;
  double val_dsc = 0;
  double val_hd95 = 0;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  double best_val_miou = -1.0;
  int64_t best_epoch = -1;
  std::string best_checkpoint;  // checkpoint base path (no extension)
  std::string last_checkpoint;
  std::string csv_path;
};

inline const char* train_csv_header() { return "epoch,train_loss,val_mIoU,val_DSC,val_HD95,seconds"; }

inline std::string train_csv_row(const EpochStats& s) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.3f",
                static_cast<long long>(s.epoch), s.train_loss, s.val_miou, s.val_dsc, s.val_hd95,
                s.seconds);
  return buf;
}

// Mean metrics over a dataset: confusion matrices are summed across images
// before deriving overlap metrics, and HD95 is averaged per image.
template <typename T>
MetricReport evaluate_dataset(const ModelConfig& cfg, const ModelParams<T>& params,
                              const Dataset<T>& ds, int64_t batch_size) {
  if (ds.size() == 0) throw ContractError("evaluate_dataset: dataset is empty");
  if (batch_size < 1) throw ContractError("evaluate_dataset: batch_size must be >= 1");
  const int64_t k = cfg.num_classes;
  std::vector<int64_t> cm(static_cast<size_t>(k * k), 0);
  double hd_sum = 0;
  const int64_t h = ds.height(), w = ds.width();
  const int64_t plane = h * w;
  for (size_t start = 0; start < ds.size(); start += static_cast<size_t>(batch_size)) {
    std::vector<size_t> ids;
    for (size_t i = start; i < std::min(ds.size(), start + static_cast<size_t>(batch_size)); ++i)
      ids.push_back(i);
    auto batch = assemble_batch(ds, ids, /*augment=*/false, /*seed=*/0, /*epoch=*/0);
    Tensor<T> logits = forward(batch.images, cfg, params);
    Tensor<int32_t> pred = argmax_lastdim(logits);  // [B,H,W]
    for (size_t b = 0; b < ids.size(); ++b) {
      std::vector<int32_t> pv(static_cast<size_t>(plane)), gv(static_cast<size_t>(plane));
      std::memcpy(pv.data(), pred.data() + static_cast<int64_t>(b) * plane,
                  sizeof(int32_t) * static_cast<size_t>(plane));
      std::memcpy(gv.data(), batch.masks.data() + static_cast<int64_t>(b) * plane,
                  sizeof(int32_t) * static_cast<size_t>(plane));
      Tensor<int32_t> pm = Tensor<int32_t>::from({h, w}, std::move(pv));
      Tensor<int32_t> gm = Tensor<int32_t>::from({h, w}, std::move(gv));
      std::vector<int64_t> c = confusion_matrix(pm, gm, k);
      for (size_t i = 0; i < cm.size(); ++i) cm[i] += c[i];
      hd_sum += hd95(pm, gm);
    }
  }
  MetricReport rep = metrics_from_confusion(cm, k);
  rep.hd95 = hd_sum / static_cast<double>(ds.size());
  return rep;
}

namespace detail {

// Deep copy of the parameter tree: the struct copy shares tensor storage, so
// every leaf is rebound to a fresh tensor with identical contents.
template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& src, const ModelConfig& cfg) {
  ModelParams<T> c = src;
  visit_params<T>(c, cfg, [](const std::string&, Tensor<T>& t) {
    t = Tensor<T>::from(t.shape(), t.vec());
  });
  return c;
}

// Contiguous shard boundaries: first (n % parts) shards get one extra item.
inline std::vector<std::pair<size_t, size_t>> shard_ranges(size_t n, size_t parts) {
  std::vector<std::pair<size_t, size_t>> out;
  size_t q = n / parts, r = n % parts, at = 0;
  for (size_t t = 0; t < parts; ++t) {
    size_t len = q + (t < r ? 1 : 0);
    out.emplace_back(at, at + len);
    at += len;
  }
  return out;
}

template <typename T>
struct ShardWorker {
  ModelParams<T> params;
  NamedTensorList<T> items;  // same order as the master list
  double loss = 0;
  size_t samples = 0;
  std::exception_ptr err;
};

}  // namespace detail

// Runs the configured training job. `resume_base` continues from a checkpoint
// written by a previous call with a compatible config (everything except
// out_dir, data_dir, and threads must match). `stop_after_epochs` optionally
// ends the run early, after that many total epochs, without changing the
// learning-rate schedule — useful for staged runs that resume later.
template <typename T = float>
TrainResult train_model(const RunConfig& rc, const std::string& resume_base = "",
                        int64_t stop_after_epochs = -1,
                        const std::function<void(const EpochStats&)>& on_epoch = {}) {
  rc.validate();
  const ModelConfig cfg = rc.model();
  const LossWeights lw = rc.loss_weights();
  namespace fs = std::filesystem;
  fs::create_directories(rc.out_dir);

  const std::string manifest = rc.data_dir + "/manifest.tsv";
  Dataset<T> train_ds = Dataset<T>::load(manifest, cfg.num_classes, "train");
  Dataset<T> val_ds = Dataset<T>::load(manifest, cfg.num_classes, "val");
  if (train_ds.size() == 0) throw DataError("train split of '" + manifest + "' is empty");
  if (val_ds.size() == 0) throw DataError("val split of '" + manifest + "' is empty");
  if (train_ds.height() != cfg.input_size || train_ds.width() != cfg.input_size)
    throw ContractError("dataset images are " + std::to_string(train_ds.height()) + "x" +
                        std::to_string(train_ds.width()) + " but input_size is " +
                        std::to_string(cfg.input_size));

  ModelParams<T> params = init_params<T>(cfg, rc.seed);
  NamedTensorList<T> items = named_parameters(params, cfg);
  for (auto& it : items) it.second.set_requires_grad(true);
  std::vector<Tensor<T>> velocity;
  velocity.reserve(items.size());
  for (auto& it : items) velocity.push_back(Tensor<T>::zeros(it.second.shape()));

  auto with_optimizer_state = [&]() {
    NamedTensorList<T> all = items;
    for (size_t i = 0; i < items.size(); ++i)
      all.emplace_back("opt.v." + items[i].first, velocity[i]);
    return all;
  };

  int64_t start_epoch = 0;
  if (!resume_base.empty()) {
    NamedTensorList<T> all = with_optimizer_state();
    CheckpointMeta meta = load_checkpoint<T>(resume_base, all);
    RunConfig saved = run_config_from_echo(meta.config_echo);
    std::vector<std::pair<std::string, std::string>> here = rc.echo(), there = saved.echo();
    std::string mismatches;
    for (size_t i = 0; i < here.size(); ++i) {
      const std::string& key = here[i].first;
      if (key == "out_dir" || key == "data_dir" || key == "threads") continue;
      if (here[i].second != there[i].second)
        mismatches += (mismatches.empty() ? "" : "; ") + key + " is '" + there[i].second +
                      "' in the checkpoint but '" + here[i].second + "' here";
    }
    if (!mismatches.empty())
      throw DataError("checkpoint '" + resume_base + "' config mismatch: " + mismatches);
    start_epoch = meta.epoch + 1;
    if (start_epoch >= rc.epochs)
      throw ContractError("checkpoint '" + resume_base + "' already covers epoch " +
                          std::to_string(meta.epoch) + " of a " + std::to_string(rc.epochs) +
                          "-epoch schedule");
  }

  const int64_t end_epoch =
      stop_after_epochs < 0 ? rc.epochs : std::min<int64_t>(rc.epochs, stop_after_epochs);
  if (end_epoch <= start_epoch)
    throw ContractError("nothing to train: start epoch " + std::to_string(start_epoch) +
                        ", end epoch " + std::to_string(end_epoch));

  TrainResult result;
  result.csv_path = rc.out_dir + "/train_log.csv";
  result.best_checkpoint = rc.out_dir + "/best";
  result.last_checkpoint = rc.out_dir + "/last";
  {
    bool fresh = resume_base.empty() || !fs::exists(result.csv_path);
    std::ofstream csv(result.csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot open '" + result.csv_path + "' for writing");
    if (fresh) csv << train_csv_header() << "\n";
  }

  // Thread workers hold deep parameter clones so each shard records its own
  // graph; gradients flow back through a fixed-order weighted reduction.
  const size_t threads = static_cast<size_t>(rc.threads);
  std::vector<detail::ShardWorker<T>> workers;
  if (threads > 1) {
    workers.resize(threads);
    for (auto& wk : workers) {
      wk.params = detail::clone_params(params, cfg);
      wk.items = named_parameters(wk.params, cfg);
      for (auto& it : wk.items) it.second.set_requires_grad(true);
    }
  }

  auto save_state = [&](const std::string& base, int64_t epoch) {
    CheckpointMeta meta;
    meta.seed = rc.seed;
    meta.epoch = epoch;
    meta.config_echo = rc.echo();
    save_checkpoint<T>(base, with_optimizer_state(), meta);
  };

  for (int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, rc.epochs, rc.learning_rate, rc.lr_min);
    auto batches = make_batches(train_ds.size(), rc.batch_size, rc.seed, epoch);
    double loss_sum = 0;
    size_t sample_sum = 0;
    for (size_t step = 0; step < batches.size(); ++step) {
      const std::vector<size_t>& ids = batches[step];
      double batch_loss = 0;
      auto fail = [&](const std::string& why) -> DomainError {
        return DomainError("training aborted at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + why);
      };
      try {
        if (threads <= 1) {
          Tape<T> tape;
          typename Tape<T>::Scope scope(tape);
          auto batch = assemble_batch(train_ds, ids, rc.augment, rc.seed, epoch);
          Tensor<T> loss = composite_loss(forward(batch.images, cfg, params), batch.masks, lw);
          batch_loss = static_cast<double>(loss.item());
          tape.backward(loss);
        } else {
          auto ranges = detail::shard_ranges(ids.size(), threads);
          std::vector<std::thread> pool;
          for (size_t t = 0; t < threads; ++t) {
            auto& wk = workers[t];
            wk.loss = 0;
            wk.samples = ranges[t].second - ranges[t].first;
            wk.err = nullptr;
            if (wk.samples == 0) continue;
            std::vector<size_t> shard(ids.begin() + static_cast<int64_t>(ranges[t].first),
                                      ids.begin() + static_cast<int64_t>(ranges[t].second));
            pool.emplace_back([&, t, shard]() {
              auto& me = workers[t];
              try {
                for (size_t i = 0; i < items.size(); ++i) {
                  std::memcpy(me.items[i].second.mutable_data(), items[i].second.data(),
                              sizeof(T) * static_cast<size_t>(items[i].second.numel()));
                  me.items[i].second.zero_grad();
                }
                Tape<T> tape;
                typename Tape<T>::Scope scope(tape);
                auto batch = assemble_batch(train_ds, shard, rc.augment, rc.seed, epoch);
                Tensor<T> loss =
                    composite_loss(forward(batch.images, cfg, me.params), batch.masks, lw);
                me.loss = static_cast<double>(loss.item());
                tape.backward(loss);
              } catch (...) {
                me.err = std::current_exception();
              }
            });
          }
          for (auto& th : pool) th.join();
          for (size_t t = 0; t < threads; ++t)
            if (workers[t].err) std::rethrow_exception(workers[t].err);
          // Ordered reduction: shard gradients land in thread order with
          // sample-count weights, so the update is reproducible for a fixed
          // thread count.
          const double n_total = static_cast<double>(ids.size());
          for (size_t i = 0; i < items.size(); ++i) {
            auto& g = items[i].second.grad_ref();
            std::fill(g.begin(), g.end(), T(0));
            for (size_t t = 0; t < threads; ++t) {
              if (workers[t].samples == 0) continue;
              const T wgt = static_cast<T>(static_cast<double>(workers[t].samples) / n_total);
              const auto& gs = workers[t].items[i].second.grad();
              for (size_t j = 0; j < g.size(); ++j) g[j] += wgt * gs[j];
            }
          }
          for (size_t t = 0; t < threads; ++t)
            batch_loss +=
                workers[t].loss * static_cast<double>(workers[t].samples) / n_total;
        }
      } catch (const DataError& e) {
        throw fail(e.what());
      }
      if (!std::isfinite(batch_loss)) throw fail("non-finite training loss");
      for (size_t i = 0; i < items.size(); ++i) {
        Tensor<T>& p = items[i].second;
        sgdw_update(p.mutable_data(), velocity[i].mutable_data(), p.grad().data(),
                    static_cast<size_t>(p.numel()), lr, rc.momentum, rc.weight_decay);
        p.zero_grad();
      }
      loss_sum += batch_loss * static_cast<double>(ids.size());
      sample_sum += ids.size();
    }

    EpochStats s;
    s.epoch = epoch;
    s.train_loss = loss_sum / static_cast<double>(sample_sum);
    MetricReport val = evaluate_dataset(cfg, params, val_ds, rc.batch_size);
    s.val_miou = val.miou;
    s.val_dsc = val.dsc;
    s.val_hd95 = val.hd95;
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_state(result.last_checkpoint, epoch);
    if (s.val_miou > result.best_val_miou) {
      result.best_val_miou = s.val_miou;
      result.best_epoch = epoch;
      save_state(result.best_checkpoint, epoch);
    }
    {
      std::ofstream csv(result.csv_path, std::ios::app);
      if (!csv) throw IoError("cannot open '" + result.csv_path + "' for writing");
      csv << train_csv_row(s) << "\n";
    }
    result.history.push_back(s);
    if (on_epoch) on_epoch(s);
  }
  return result;
}

}  // namespace hcm
