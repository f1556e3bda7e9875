#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_tool(const std::string& args, const fs::path& log) {
    const std::string cmd =
        std::string(CBV_TOOL_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    out << text;
}

}  // namespace

TEST_CASE("cli: usage errors exit 2, help exits 0") {
    fs::path dir = fresh_dir("cbv_cli_usage");
    const fs::path log = dir / "log.txt";
    CHECK(run_tool("", log) == 2);
    CHECK(run_tool("no-such-command", log) == 2);
    CHECK(run_tool("gen-data --no-such-flag 1", log) == 2);
    CHECK(run_tool("--help", log) == 0);
    CHECK(run_tool("poison --help", log) == 0);
    fs::remove_all(dir);
}

TEST_CASE("cli: pipeline end to end, reports carry provenance, reruns are byte identical") {
    fs::path ws = fresh_dir("cbv_cli_ws");
    const fs::path log = ws / "log.txt";
    const std::string out = " --out " + ws.string();

    write_file(ws / "gd.json",
               R"({"num_classes": 2, "per_class_train": 6, "per_class_test": 3, "image_size": 16})");
    write_file(ws / "te.json",
               R"({"embed_dim": 12, "enc_c1": 4, "enc_c2": 6, "enc_c3": 6, "enc_epochs": 2,)"
               R"( "surrogate_channels": [5, 6], "surrogate_epochs": 2})");
    write_file(ws / "td.json", R"({"hidden": 6, "temb_dim": 4, "T": 4, "epochs": 2})");
    write_file(ws / "gu.json", R"({"iterations": 6, "pairs": 6})");
    write_file(ws / "gm.json", R"({"limit": 3, "label": 0})");
    write_file(ws / "po.json", R"({"rate": 0.5, "T": 4, "record_trajectory": true})");
    write_file(ws / "tv.json", R"({"channels": [4, 6], "epochs": 2})");
    write_file(ws / "ev.json", R"({"strip_probes": 4, "strip_overlays": 3, "strip_bins": 6})");
    write_file(ws / "st.json", R"({"probes": 4, "overlays": 3, "bins": 6})");

    REQUIRE(run_tool("gen-data --config " + (ws / "gd.json").string() + " --seed 1" + out, log) == 0);
    REQUIRE(run_tool("train-encoders --config " + (ws / "te.json").string() + " --seed 2" + out,
                     log) == 0);
    REQUIRE(run_tool("train-diffusion --config " + (ws / "td.json").string() + " --seed 3" + out,
                     log) == 0);
    REQUIRE(run_tool("gen-uap --config " + (ws / "gu.json").string() + " --seed 4" + out, log) == 0);
    REQUIRE(run_tool("gen-mask --config " + (ws / "gm.json").string() + " --seed 5" + out, log) == 0);
    REQUIRE(run_tool("poison --config " + (ws / "po.json").string() + " --seed 6" + out, log) == 0);
    REQUIRE(run_tool("train-victim --config " + (ws / "tv.json").string() + " --seed 7" + out,
                     log) == 0);
    REQUIRE(run_tool("evaluate --config " + (ws / "ev.json").string() + " --seed 8" + out, log) == 0);
    REQUIRE(run_tool("strip --config " + (ws / "st.json").string() + " --seed 9" + out, log) == 0);

    for (const char* rel :
         {"data/manifest.json", "data/gen_report.json", "models/encoder.cbvw",
          "models/surrogate.cbvw", "models/encoders_report.json", "models/scorenet.cbvw",
          "models/diffusion_report.json", "trigger/trigger.cbvw", "trigger/trigger.json",
          "trigger/preview.png", "trigger/uap_report.json", "masks/masks_report.json",
          "poison/plan.json", "poison/data/manifest.json", "poison/provenance.json",
          "poison/trajectory.json", "victim/victim.cbvw", "victim/victim_report.json",
          "eval/metrics.json", "strip/strip.json"}) {
        INFO("missing artifact: ", std::string(rel));
        CHECK(fs::exists(ws / rel));
    }
    // the filmstrip only exists when the first poison actually took steps
    const auto traj = nlohmann::json::parse(slurp(ws / "poison/trajectory.json"));
    CHECK(fs::exists(ws / "poison/filmstrip.png") == !traj["steps"].empty());

    // every report embeds the same provenance block shape
    for (const char* rel :
         {"data/gen_report.json", "models/encoders_report.json", "models/diffusion_report.json",
          "trigger/uap_report.json", "masks/masks_report.json", "poison/provenance.json",
          "victim/victim_report.json", "eval/metrics.json", "strip/strip.json"}) {
        const auto doc = nlohmann::json::parse(slurp(ws / rel));
        INFO("report: ", rel);
        REQUIRE(doc.contains("provenance"));
        CHECK(doc["provenance"]["config_sha256"].get<std::string>().size() == 64);
        CHECK(doc["provenance"]["tool_version"] == "0.1.0");
        CHECK(doc["provenance"]["seed"].is_number());
    }

    const auto metrics = nlohmann::json::parse(slurp(ws / "eval/metrics.json"));
    CHECK(metrics["asr"]["total"].get<int>() > 0);
    CHECK(metrics["clean"]["total"].get<int>() == 6);
    CHECK(metrics["quality"]["psnr"].size() == 3);  // rate 0.5 of 6 class-0 train
    CHECK(metrics["strip"]["clean"]["entropy"].size() == 4);

    // rebuilding the poison stage in a fresh workspace reproduces every byte
    fs::path ws2 = fresh_dir("cbv_cli_ws2");
    fs::copy(ws / "data", ws2 / "data", fs::copy_options::recursive);
    fs::copy(ws / "models", ws2 / "models", fs::copy_options::recursive);
    fs::copy(ws / "trigger", ws2 / "trigger", fs::copy_options::recursive);
    fs::copy(ws / "victim", ws2 / "victim", fs::copy_options::recursive);
    const std::string out2 = " --out " + ws2.string();
    REQUIRE(run_tool("poison --config " + (ws / "po.json").string() + " --seed 6" + out2, log) == 0);
    for (const char* rel : {"poison/plan.json", "poison/provenance.json", "poison/trajectory.json"})
        CHECK(slurp(ws / rel) == slurp(ws2 / rel));
    const auto pois = nlohmann::json::parse(slurp(ws / "poison/provenance.json"));
    for (const auto& entry : pois["images"]) {
        char name[32];
        std::snprintf(name, sizeof(name), "images/%06llu.png",
                      entry["id"].get<unsigned long long>());
        CHECK(slurp(ws / "poison/data" / name) == slurp(ws2 / "poison/data" / name));
    }

    REQUIRE(run_tool("evaluate --config " + (ws / "ev.json").string() + " --seed 8" + out2, log) == 0);
    CHECK(slurp(ws / "eval/metrics.json") == slurp(ws2 / "eval/metrics.json"));

    // a config key the command does not define is rejected
    write_file(ws / "typo.json", R"({"ratee": 0.5})");
    CHECK(run_tool("poison --config " + (ws / "typo.json").string() + out, log) == 1);

    // missing checkpoint: runtime failure naming the error type
    write_file(ws / "novictim.json", R"({"victim": "victim/gone.cbvw"})");
    CHECK(run_tool("evaluate --config " + (ws / "novictim.json").string() + " --seed 8" + out,
                   log) == 1);
    CHECK(slurp(log).find("MissingFile") != std::string::npos);

    fs::remove_all(ws);
    fs::remove_all(ws2);
}
