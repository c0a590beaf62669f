// Command-line front end for the simulated overlay.
//
// Subcommands:
//   run          execute a scenario file (or a synthetic one) and print metrics
//   verify       build a network and check routing tables against the oracle
//   scaling      measure lookup cost across network sizes
//   codec-golden print reference encodings of the wire frames
//
// Exit codes: 0 ok, 2 bad usage/config, 3 verification failed, 4 I/O error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iaxkad/scenario.hpp"
#include "iaxkad/verify.hpp"

namespace {

int write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return 0;
  }
  std::ofstream out(path);
  if (!out) {
    std::cerr << "error: cannot open " << path << " for writing\n";
    return 4;
  }
  out << text;
  return 0;
}

std::string hex_dump(const std::vector<std::uint8_t>& bytes) {
  std::ostringstream s;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (i) s << ' ';
    char buf[3];
    std::snprintf(buf, sizeof(buf), "%02x", bytes[i]);
    s << buf;
  }
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  using namespace iaxkad;

  CLI::App app{"IAX-over-Kademlia overlay simulator"};
  app.require_subcommand(1);

  KademliaParams params;
  std::uint64_t seed = 1;
  int peers = 32;
  double loss = 0.0;
  std::string scenario_path;
  std::string out_path;
  std::vector<int> sizes{25, 50, 100, 200};

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "deterministic RNG seed");
    cmd->add_option("--alpha", params.alpha, "lookup/flood fan-out");
    cmd->add_option("--k", params.k, "bucket capacity / result size");
    cmd->add_option("--bits", params.bits, "id width in bits (8..256)");
    cmd->add_option("--out", out_path, "write output here instead of stdout");
  };

  CLI::App* run = app.add_subcommand("run", "execute a scenario");
  run->add_option("--scenario", scenario_path, "scenario JSON file");
  run->add_option("--peers", peers, "peer count when no scenario is given");
  run->add_option("--loss", loss, "frame loss probability [0,1]");
  add_common(run);

  CLI::App* verify = app.add_subcommand(
      "verify", "compare every routing table with the global oracle");
  verify->add_option("--peers", peers, "peer count");
  verify->add_option("--loss", loss, "frame loss probability [0,1]");
  add_common(verify);

  CLI::App* scaling =
      app.add_subcommand("scaling", "lookup cost across network sizes");
  scaling->add_option("--sizes", sizes, "ascending network sizes");
  add_common(scaling);

  CLI::App* golden =
      app.add_subcommand("codec-golden", "print reference frame encodings");
  golden->add_option("--out", out_path, "write output here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      Scenario s;
      if (!scenario_path.empty()) {
        std::ifstream in(scenario_path);
        if (!in) {
          std::cerr << "error: cannot read " << scenario_path << "\n";
          return 4;
        }
        nlohmann::json j;
        in >> j;
        s = Scenario::from_json(j);
      } else {
        s.n_peers = peers;
        s.auto_calls = std::max(1, peers / 4);
      }
      // flags override scenario-file values when given explicitly
      if (run->count("--seed")) s.seed = seed;
      if (run->count("--alpha")) s.params.alpha = params.alpha;
      if (run->count("--k")) s.params.k = params.k;
      if (run->count("--bits")) s.params.bits = params.bits;
      if (run->count("--loss")) s.loss = loss;
      std::function<void(const std::string&)> trace;
      std::ofstream trace_out;
      if (const char* log = std::getenv("IAXKAD_LOG"); log && *log) {
        trace_out.open(log);
        if (!trace_out) {
          std::cerr << "error: cannot open trace file " << log << "\n";
          return 4;
        }
        trace = [&trace_out](const std::string& line) {
          trace_out << line << "\n";
        };
      }
      Metrics m = run_scenario(s, trace);
      return write_or_print(out_path, m.to_string());
    }

    if (*verify) {
      if (peers < 2) {
        std::cerr << "error: verify needs at least 2 peers\n";
        return 2;
      }
      LinkModel link;
      link.loss_probability = loss;
      VerifyReport report = verify_network(peers, params, seed, link);
      int rc = write_or_print(out_path, report.to_string());
      if (rc != 0) return rc;
      return report.ok() ? 0 : 3;
    }

    if (*scaling) {
      auto rows = measure_scaling(sizes, seed, params);
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& r : rows)
        j.push_back({{"n", r.n},
                     {"mean_rounds", r.mean_rounds},
                     {"mean_messages", r.mean_messages}});
      return write_or_print(out_path, j.dump(2) + "\n");
    }

    if (*golden) {
      std::ostringstream s;
      FullFrame ack;
      ack.source_call = 5;
      ack.dest_call = 9;
      ack.retransmission = false;
      ack.timestamp_ms = 0;
      ack.oseqno = 0;
      ack.iseqno = 1;
      ack.kind = MessageKind::RegAck;
      s << "REGACK src=5 dst=9 ts=0 oseq=0 iseq=1: "
        << hex_dump(encode_frame(ack)) << "\n";
      MiniFrame mini;
      mini.source_call = 5;
      mini.timestamp_low = 0x1234;
      mini.payload = {0x61, 0x62};
      s << "MINI src=5 ts=0x1234 payload=ab: " << hex_dump(encode_frame(mini))
        << "\n";
      s << "derive(peerx@servery.com, 160 bits) = "
        << derive_peer_id("peerx@servery.com", KademliaParams{}).to_hex()
        << "\n";
      return write_or_print(out_path, s.str());
    }
  } catch (const ScenarioError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
