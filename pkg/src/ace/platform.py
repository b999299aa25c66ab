"""Wires one simulated deployment together: clock, registry, links, brokers,
file service, controller and one agent per node."""

from __future__ import annotations

from typing import Optional

from .controller import IMAGES, Agent, Controller, DeploymentRecord, ImageRegistry
from .fileservice import FileService
from .inapp import inject_controllers
from .infrastructure import InfrastructureRecord, NodeSpec, Registry, build_reference_testbed
from .messaging import MessageService
from .orchestrator import orchestrate
from .simnet import Scenario, SimLink, Simulator, ms
from .topology import ApplicationTopology, DeploymentPlan


class Platform:
    def __init__(
        self,
        scenario: Optional[Scenario] = None,
        registry: Optional[Registry] = None,
        infra: Optional[InfrastructureRecord] = None,
        images: ImageRegistry = IMAGES,
        log_lan: bool = False,
        agent_start_ms: float = 200.0,
    ):
        self.scenario = scenario or Scenario()
        if registry is None:
            registry, infra = build_reference_testbed()
        elif infra is None:
            infra = next(iter(registry.infras.values()))
        self.registry = registry
        self.infra = infra
        self.images = images
        self.agent_start_ms = agent_start_ms
        sc = self.scenario
        self.sim = Simulator(sc.seed)
        cc = str(infra.cc.id)
        self.wan = {
            str(ec.id): SimLink(self.sim, f"wan:{ec.id}", (str(ec.id), cc),
                                sc.wan_up_mbps, sc.wan_down_mbps, sc.wan_delay_ms)
            for ec in infra.ecs
        }
        self.lan = {
            str(c.id): SimLink(self.sim, f"lan:{c.id}", (str(c.id), str(c.id)),
                               sc.lan_mbps, sc.lan_mbps, sc.lan_delay_ms, shared=True)
            for c in infra.clusters
        }
        self.messaging = MessageService(self.sim, infra, self.wan, self.lan, log_lan=log_lan)
        for ec in infra.ecs:
            self.messaging.configure_bridge(ec.id, ["ace/ctl/+/ack", "ace/ctl/+/status"], "up")
            for node in ec.nodes:
                self.messaging.configure_bridge(ec.id, [f"ace/ctl/{node.id}"], "down")
        self.files = FileService(self.messaging)
        self.controller = Controller(self)
        self.agents: dict[str, Agent] = {}
        for node in infra.nodes():
            self._add_agent(node)
        registry.subscribe(self._on_registry)
        for window in sc.partitions:
            link = self.wan_for(window.cluster)
            link.set_partition(True, at=ms(window.start_ms))
            if window.end_ms is not None:
                link.set_partition(False, at=ms(window.end_ms))

    def _add_agent(self, node: NodeSpec) -> None:
        self.agents[str(node.id)] = Agent(self, node, start_delay_ms=self.agent_start_ms)

    def _on_registry(self, event: str, node: NodeSpec) -> None:
        if event == "registered" and node.id.infra == self.infra.id.infra:
            if not node.id.is_cc:
                self.messaging.configure_bridge(node.id.cluster_id, [f"ace/ctl/{node.id}"], "down")
            self._add_agent(node)
        self.controller.on_node_event(event, node)

    def wan_for(self, cluster: str) -> SimLink:
        """WAN link of an EC given by id (``inf-1.ec-2``) or name (``ec-2``)."""
        if cluster in self.wan:
            return self.wan[cluster]
        return self.wan[str(self.infra.cluster_by_name(cluster).id)]

    def partition(self, cluster: str, partitioned: bool = True) -> None:
        self.wan_for(cluster).set_partition(partitioned)

    def prepare(self, topology: ApplicationTopology) -> ApplicationTopology:
        """Add the in-app controllers the app needs for this infrastructure."""
        return inject_controllers(topology, [ec.id.cluster for ec in self.infra.ecs])

    def plan(self, topology: ApplicationTopology) -> DeploymentPlan:
        return orchestrate(self.prepare(topology), self.infra, self.controller.commitments())

    def update(self, app: str, topology: ApplicationTopology, mode: str = "incremental") -> DeploymentRecord:
        return self.controller.update(app, self.prepare(topology), mode)

    def deploy(self, topology: ApplicationTopology) -> DeploymentRecord:
        return self.controller.deploy(self.plan(topology))

    def run_for(self, duration_ms: float) -> None:
        self.sim.run_until(self.sim.now + ms(duration_ms))

    def settle(self, record: DeploymentRecord, timeout_ms: float = 10_000.0, step_ms: float = 50.0) -> str:
        """Advance time until ``record`` leaves ``deploying`` or the timeout passes."""
        end = self.sim.now + ms(timeout_ms)
        while record.status == "deploying" and self.sim.now < end:
            self.sim.run_until(min(end, self.sim.now + ms(step_ms)))
        return record.status

    def behaviors(self, app: Optional[str] = None, component: Optional[str] = None) -> list:
        """Running behavior objects, sorted by instance id."""
        out = []
        for agent in self.agents.values():
            for iid, run in agent.instances.items():
                if run.behavior is None or run.state != "running":
                    continue
                if app is not None and run.entry.app != app:
                    continue
                if component is not None and run.entry.component != component:
                    continue
                out.append((iid, run.behavior))
        return [b for _, b in sorted(out, key=lambda item: item[0])]
