#include "cbv/harness/victim.hpp"

#include "cbv/error.hpp"
#include "cbv/harness/png.hpp"

namespace cbv::harness {

using numcore::Tensor;

encoders::ConvClassifier train_victim(const DatasetManifest& m, const VictimConfig& cfg) {
    const encoders::Dataset data = to_dataset(m, Split::Train);
    if (data.samples.empty()) throw EmptyInput("train split is empty");
    encoders::ClassifierConfig cc;
    cc.in_channels = data.samples.front().image.extent(0);
    cc.image_size = data.samples.front().image.extent(1);
    cc.num_classes = m.classes.size();
    cc.channels = cfg.channels;
    encoders::ConvClassifier victim(cc, cfg.init_seed);
    encoders::train_classifier(victim, data, cfg.train);
    return victim;
}

AsrReport eval_asr(const encoders::ConvClassifier& victim, const DatasetManifest& m,
                   const trigger::UapTrigger& trig, std::uint32_t original, std::uint32_t target) {
    AsrReport rep;
    for (std::size_t i : m.indices(Split::Test, original)) {
        const Tensor x = read_png_tensor(m.resolve(m.records[i]));
        rep.success += victim.predict(trigger::apply_trigger(x, trig)) == target ? 1 : 0;
        rep.total += 1;
    }
    if (rep.total == 0) throw EmptyClass("test split has no original-class images");
    rep.asr = double(rep.success) / double(rep.total);
    return rep;
}

CleanReport eval_clean(const encoders::ConvClassifier& victim, const DatasetManifest& m) {
    CleanReport rep;
    for (std::size_t i : m.indices(Split::Test)) {
        const Tensor x = read_png_tensor(m.resolve(m.records[i]));
        rep.correct += victim.predict(x) == m.records[i].label ? 1 : 0;
        rep.total += 1;
    }
    if (rep.total == 0) throw EmptyInput("test split is empty");
    rep.accuracy = double(rep.correct) / double(rep.total);
    return rep;
}

}  // namespace cbv::harness
